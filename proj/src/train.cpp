#include "dcmnet/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "dcmnet/rng.hpp"

namespace dcmnet {

std::string modality_name(ModalityMode mode) {
  switch (mode) {
    case ModalityMode::HL: return "HL";
    case ModalityMode::HOnly: return "H";
    case ModalityMode::LOnly: return "L";
  }
  return "?";
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw std::invalid_argument("train config: batch size must be positive");
  if (learning_rate < 0.0) throw std::invalid_argument("train config: negative learning rate");
  if (noise_sigma < 0.0) throw std::invalid_argument("train config: negative noise sigma");
}

// ---- loss -----------------------------------------------------------------------

Tensor cross_entropy(const Tensor& logits, std::uint16_t label, Tape* tape) {
  const std::size_t c = logits.size();
  if (label < 1 || label > c) {
    throw std::invalid_argument("cross_entropy: label " + std::to_string(label) +
                                " outside [1, " + std::to_string(c) + "]");
  }
  const std::size_t target = label - 1;
  double mx = logits.values()[0];
  for (double v : logits.values()) mx = std::max(mx, v);
  double acc = 0.0;
  for (double v : logits.values()) acc += std::exp(v - mx);
  const double lse = mx + std::log(acc);
  Tensor loss = Tensor::from_data({1}, {lse - logits.values()[target]});
  if (tape && logits.requires_grad()) {
    loss.set_requires_grad(true);
    tape->record([logits, loss, lse, target, c]() {
      if (!loss.has_grad()) return;
      const double g = loss.grad()[0];
      std::vector<double> dl(c);
      for (std::size_t i = 0; i < c; ++i) {
        const double p = std::exp(logits.values()[i] - lse);
        dl[i] = g * (p - (i == target ? 1.0 : 0.0));
      }
      logits.accumulate_grad(dl);
    });
  }
  return loss;
}

// ---- optimizer ---------------------------------------------------------------------

Optimizer::Optimizer(OptimizerKind kind, double lr, double beta1, double beta2, double eps)
    : kind_(kind), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Optimizer::zero_grad(std::vector<Parameter>& params) {
  for (Parameter& p : params) p.tensor.clear_grad();
}

void Optimizer::step(std::vector<Parameter>& params) {
  if (kind_ == OptimizerKind::Adam && m_.empty()) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i].assign(params[i].tensor.size(), 0.0);
      v_[i].assign(params[i].tensor.size(), 0.0);
    }
  }
  ++t_;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& w = params[i].tensor;
    if (!w.has_grad()) continue;
    const std::vector<double>& g = w.grad();
    std::vector<double>& vals = w.values_mut();
    if (kind_ == OptimizerKind::Sgd) {
      for (std::size_t j = 0; j < vals.size(); ++j) vals[j] -= lr_ * g[j];
      continue;
    }
    const double corr1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double corr2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t j = 0; j < vals.size(); ++j) {
      m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g[j];
      v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * g[j] * g[j];
      const double mhat = m_[i][j] / corr1;
      const double vhat = v_[i][j] / corr2;
      vals[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

// ---- training loop --------------------------------------------------------------------

namespace {

std::pair<Tensor, Tensor> modality_inputs(const PatchPair& sample, ModalityMode mode) {
  switch (mode) {
    case ModalityMode::HL: return {sample.hsi_patch, sample.lidar_patch};
    case ModalityMode::HOnly: return {sample.hsi_patch, Tensor::zeros(sample.lidar_patch.shape())};
    case ModalityMode::LOnly: return {Tensor::zeros(sample.hsi_patch.shape()), sample.lidar_patch};
  }
  throw std::logic_error("unreachable");
}

}  // namespace

TrainResult train(DcmNet& model, const SceneCube& cube, const TrainConfig& cfg) {
  cfg.validate();
  PcaModel pca = fit_pca(cube, model.config().pca_components);
  Standardizer stats = fit_standardizer(cube, pca);
  model.set_preproc(pca, stats);
  std::vector<PatchPair> samples =
      extract_patches(cube, pca, stats, model.config().patch_size, SplitTag::Train);

  Rng shuffle_rng(stream_seed(cfg.seed, "shuffle"));
  Rng augment_rng(stream_seed(cfg.seed, "augment"));
  Optimizer opt(cfg.optimizer, cfg.learning_rate);

  TrainResult result;
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const double inv_batch = 1.0 / static_cast<double>(end - start);
      Optimizer::zero_grad(model.parameters());
      for (std::size_t i = start; i < end; ++i) {
        PatchPair sample = samples[order[i]];
        if (cfg.augment) sample = augment(sample, augment_rng, cfg.noise_sigma);
        auto [hsi, lidar] = modality_inputs(sample, cfg.modality);
        Tape tape;
        ForwardResult out = model.forward(hsi, lidar, &tape);
        Tensor loss = cross_entropy(out.logits, sample.label, &tape);
        const double lv = loss.scalar();
        if (!std::isfinite(lv) || lv < 0.0) {
          throw std::runtime_error("train: loss became invalid (" + std::to_string(lv) + ")");
        }
        epoch_loss += lv;
        tape.backward(scale(loss, inv_batch, &tape));
      }
      opt.step(model.parameters());
    }
    result.loss_history.push_back(epoch_loss / static_cast<double>(samples.size()));
  }
  return result;
}

// ---- evaluation -------------------------------------------------------------------------

void compute_metrics(EvalReport& report) {
  const std::size_t c = report.num_classes;
  report.total = 0;
  std::vector<std::size_t> row(c, 0), col(c, 0);
  std::size_t diag = 0;
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      const std::size_t n = report.cm(i, j);
      row[i] += n;
      col[j] += n;
      report.total += n;
      if (i == j) diag += n;
    }
  }
  if (report.total == 0) throw std::invalid_argument("metrics: empty confusion matrix");
  const double n = static_cast<double>(report.total);
  report.oa = static_cast<double>(diag) / n;

  report.per_class_accuracy.assign(c, 0.0);
  double recall_sum = 0.0;
  std::size_t with_support = 0;
  for (std::size_t i = 0; i < c; ++i) {
    if (row[i] == 0) continue;
    report.per_class_accuracy[i] =
        static_cast<double>(report.cm(i, i)) / static_cast<double>(row[i]);
    recall_sum += report.per_class_accuracy[i];
    ++with_support;
  }
  report.aa = with_support ? recall_sum / static_cast<double>(with_support) : 0.0;

  double pe = 0.0;
  for (std::size_t i = 0; i < c; ++i) {
    pe += (static_cast<double>(row[i]) / n) * (static_cast<double>(col[i]) / n);
  }
  const double denom = 1.0 - pe;
  if (std::abs(denom) < 1e-15) {
    report.kappa = report.oa >= 1.0 ? 1.0 : 0.0;
  } else {
    report.kappa = (report.oa - pe) / denom;
  }
}

EvalReport evaluate(const DcmNet& model, const SceneCube& cube, SplitTag split,
                    ModalityMode modality, std::vector<RoutingTrace>* traces,
                    std::vector<std::uint16_t>* trace_labels) {
  PcaModel pca;
  Standardizer stats;
  if (model.has_preproc()) {
    pca = model.pca();
    stats = model.standardizer();
  } else {
    pca = fit_pca(cube, model.config().pca_components);
    stats = fit_standardizer(cube, pca);
  }
  if (pca.input_dim() != cube.bands()) {
    throw std::invalid_argument("evaluate: model preprocessing expects " +
                                std::to_string(pca.input_dim()) + " bands, cube has " +
                                std::to_string(cube.bands()));
  }
  const std::vector<PatchPair> samples =
      extract_patches(cube, pca, stats, model.config().patch_size, split);

  EvalReport report;
  report.num_classes = model.config().num_classes;
  report.confusion.assign(report.num_classes * report.num_classes, 0);
  for (const PatchPair& sample : samples) {
    auto [hsi, lidar] = modality_inputs(sample, modality);
    ForwardResult out = model.forward(hsi, lidar);
    std::size_t pred = 0;
    for (std::size_t i = 1; i < out.logits.size(); ++i) {
      if (out.logits.values()[i] > out.logits.values()[pred]) pred = i;
    }
    if (sample.label < 1 || sample.label > report.num_classes) {
      throw std::invalid_argument("evaluate: sample label outside model classes");
    }
    report.confusion[(sample.label - 1) * report.num_classes + pred]++;
    if (traces) traces->push_back(out.trace);
    if (trace_labels) trace_labels->push_back(sample.label);
  }
  compute_metrics(report);
  return report;
}

// ---- ablations ----------------------------------------------------------------------------

AblationSuite suite_from_name(const std::string& name) {
  if (name == "blocks") return AblationSuite::Blocks;
  if (name == "router") return AblationSuite::Router;
  if (name == "attention") return AblationSuite::Attention;
  if (name == "layers") return AblationSuite::Layers;
  if (name == "modality") return AblationSuite::Modality;
  throw std::invalid_argument("unknown ablation suite '" + name + "'");
}

namespace {

struct Variant {
  std::string name;
  ModelConfig model;
  TrainConfig train;
};

std::vector<Variant> build_variants(AblationSuite suite, const ModelConfig& base_model,
                                    const TrainConfig& base_train) {
  std::vector<Variant> out;
  auto push = [&](const std::string& name, ModelConfig m, TrainConfig t) {
    out.push_back(Variant{name, std::move(m), std::move(t)});
  };
  switch (suite) {
    case AblationSuite::Blocks: {
      // the seven non-empty subsets, listed as in the block-influence table
      const std::vector<std::vector<BlockKind>> subsets = {
          {BlockKind::Bcab},
          {BlockKind::Bsab},
          {BlockKind::Icb},
          {BlockKind::Bsab, BlockKind::Bcab},
          {BlockKind::Bcab, BlockKind::Icb},
          {BlockKind::Bsab, BlockKind::Icb},
          {BlockKind::Bsab, BlockKind::Bcab, BlockKind::Icb},
      };
      for (const auto& subset : subsets) {
        ModelConfig m = base_model;
        m.enabled_blocks = subset;
        std::string name;
        for (BlockKind k : subset) {
          if (!name.empty()) name += "+";
          std::string bn = block_name(k);
          std::transform(bn.begin(), bn.end(), bn.begin(), ::tolower);
          name += bn;
        }
        push(name, std::move(m), base_train);
      }
      break;
    }
    case AblationSuite::Router: {
      push("dcmnet", base_model, base_train);
      ModelConfig prime = base_model;
      prime.router = RouterMode::UniformAverage;
      push("dcmnet_uniform", std::move(prime), base_train);
      ModelConfig star = base_model;
      star.router = RouterMode::Off;
      star.enabled_blocks = {BlockKind::Icb};
      push("dcmnet_plain", std::move(star), base_train);
      break;
    }
    case AblationSuite::Attention: {
      ModelConfig self_cfg = base_model;
      self_cfg.attention = AttentionKind::SelfAttention;
      push("self", std::move(self_cfg), base_train);
      ModelConfig bil = base_model;
      bil.attention = AttentionKind::Bilinear;
      push("bilinear", std::move(bil), base_train);
      break;
    }
    case AblationSuite::Layers: {
      for (std::size_t layers = 1; layers <= 3; ++layers) {
        ModelConfig m = base_model;
        m.routing_layers = layers;
        push(std::to_string(layers) + "-layer", std::move(m), base_train);
      }
      break;
    }
    case AblationSuite::Modality: {
      for (ModalityMode mode : {ModalityMode::LOnly, ModalityMode::HOnly, ModalityMode::HL}) {
        TrainConfig t = base_train;
        t.modality = mode;
        push("dcmnet-" + modality_name(mode), base_model, t);
      }
      break;
    }
  }
  return out;
}

}  // namespace

std::vector<AblationRow> run_ablation(AblationSuite suite, const ModelConfig& base_model,
                                      const TrainConfig& base_train, const SceneCube& cube) {
  std::vector<AblationRow> rows;
  for (const Variant& variant : build_variants(suite, base_model, base_train)) {
    variant.model.validate();
    DcmNet model(variant.model, variant.train.seed);
    train(model, cube, variant.train);
    AblationRow row;
    row.variant = variant.name;
    row.train_report = evaluate(model, cube, SplitTag::Train, variant.train.modality);
    row.test_report = evaluate(model, cube, SplitTag::Test, variant.train.modality);
    row.cost = model.cost();
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace dcmnet
