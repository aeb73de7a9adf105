#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dcmnet/data.hpp"
#include "dcmnet/model.hpp"
#include "dcmnet/tensor.hpp"

namespace dcmnet {

enum class OptimizerKind { Sgd, Adam };
enum class ModalityMode { HL, HOnly, LOnly };

std::string modality_name(ModalityMode mode);

struct TrainConfig {
  std::size_t epochs = 40;
  std::size_t batch_size = 64;
  double learning_rate = 1e-3;
  OptimizerKind optimizer = OptimizerKind::Adam;
  std::uint64_t seed = 7;
  bool augment = true;
  double noise_sigma = 0.05;
  ModalityMode modality = ModalityMode::HL;

  void validate() const;
};

// -log softmax(logits)[label], label is 1-based; stable via log-sum-exp.
// The gradient is softmax(logits) - onehot(label).
Tensor cross_entropy(const Tensor& logits, std::uint16_t label, Tape* tape = nullptr);

// Adam / plain gradient descent over the model's registered parameters.
class Optimizer {
 public:
  explicit Optimizer(OptimizerKind kind, double lr, double beta1 = 0.9, double beta2 = 0.999,
                     double eps = 1e-8);
  void step(std::vector<Parameter>& params);
  static void zero_grad(std::vector<Parameter>& params);

 private:
  OptimizerKind kind_;
  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct TrainResult {
  std::vector<double> loss_history;  // mean train loss per epoch
};

// Fits the preprocessing (PCA + standardization) on the cube's train split,
// stores it on the model, then runs mini-batch optimization. Deterministic
// under cfg.seed.
TrainResult train(DcmNet& model, const SceneCube& cube, const TrainConfig& cfg);

struct EvalReport {
  std::size_t num_classes = 0;
  std::vector<std::size_t> confusion;  // C x C row-major, rows = ground truth
  std::vector<double> per_class_accuracy;
  double oa = 0.0;
  double aa = 0.0;
  double kappa = 0.0;
  std::size_t total = 0;

  std::size_t cm(std::size_t truth, std::size_t pred) const {
    return confusion[truth * num_classes + pred];
  }
};

// Fills oa / aa / kappa / per-class accuracy from the confusion counts.
void compute_metrics(EvalReport& report);

EvalReport evaluate(const DcmNet& model, const SceneCube& cube, SplitTag split,
                    ModalityMode modality = ModalityMode::HL,
                    std::vector<RoutingTrace>* traces = nullptr,
                    std::vector<std::uint16_t>* trace_labels = nullptr);

// ---- ablation orchestration --------------------------------------------------

enum class AblationSuite { Blocks, Router, Attention, Layers, Modality };

AblationSuite suite_from_name(const std::string& name);  // throws on unknown name

struct AblationRow {
  std::string variant;
  EvalReport train_report;
  EvalReport test_report;
  CostReport cost;
};

std::vector<AblationRow> run_ablation(AblationSuite suite, const ModelConfig& base_model,
                                      const TrainConfig& base_train, const SceneCube& cube);

}  // namespace dcmnet
