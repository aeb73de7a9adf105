#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dcmnet/data.hpp"
#include "dcmnet/tensor.hpp"

namespace dcmnet {

// Canonical block numbering used everywhere: BSAB = 0, BCAB = 1, ICB = 2.
enum class BlockKind : std::size_t { Bsab = 0, Bcab = 1, Icb = 2 };
enum class AttentionKind { Bilinear, SelfAttention };
enum class RouterMode { Soft, UniformAverage, Off };

std::string block_name(BlockKind kind);

struct Conv2dSpec {
  std::size_t channels = 0;
  std::size_t kh = 0;
  std::size_t kw = 0;
};

struct Conv3dSpec {
  std::size_t channels = 0;
  std::size_t kd = 0;
  std::size_t kh = 0;
  std::size_t kw = 0;
};

struct ModelConfig {
  std::size_t input_bands = 0;     // spectral bands before PCA
  std::size_t pca_components = 0;  // K
  std::size_t patch_size = 0;      // p (odd)
  std::size_t lidar_channels = 1;  // c_l
  std::size_t num_classes = 0;     // C
  std::array<Conv3dSpec, 3> hsi_layers{};
  std::array<Conv2dSpec, 3> lidar_layers{};
  std::size_t routing_layers = 3;    // L in {1,2,3}
  std::size_t routing_channels = 0;  // c
  std::size_t routing_spatial = 0;   // s, with d = s*s
  std::size_t gate_hidden = 0;
  std::vector<BlockKind> enabled_blocks{BlockKind::Bsab, BlockKind::Bcab, BlockKind::Icb};
  AttentionKind attention = AttentionKind::Bilinear;
  RouterMode router = RouterMode::Soft;

  std::size_t routing_dim() const { return routing_spatial * routing_spatial; }
  bool block_enabled(BlockKind kind) const;
  // routing layer k (0-based) consumes encoder level (3 - L + k), 0-based
  std::size_t encoder_level(std::size_t routing_layer) const {
    return 3 - routing_layers + routing_layer;
  }
  void validate() const;  // rejects inconsistent configurations at build time
};

std::string config_to_json(const ModelConfig& cfg);  // canonical (sorted keys, compact)
ModelConfig config_from_json(const std::string& json);

// Shape pipeline derived from a config; construction performs full
// consistency checking so a built model can never shape-fault mid-forward.
struct ShapePlan {
  std::array<std::array<std::size_t, 4>, 3> hsi;    // (C, D, H, W) after each 3-D conv
  std::array<std::array<std::size_t, 3>, 3> lidar;  // (C, H, W) after each 2-D conv
  std::array<std::size_t, 3> proj_hsi_kernel{};     // per encoder level
  std::array<std::size_t, 3> proj_lidar_kernel{};
};
ShapePlan plan_shapes(const ModelConfig& cfg);

// Named profiles.
ModelConfig houston2013_config();
ModelConfig synthetic_default_config();
ModelConfig tiny_gradcheck_config();

// Generic builder following the reference layer pattern: lidar spatial
// kernels 3,3,5 and hsi depth kernels 9,7,5, each reduced to fit the extent
// they meet. Channel counts may be overridden.
ModelConfig make_model_config(std::size_t input_bands, std::size_t pca_components,
                              std::size_t patch_size, std::size_t lidar_channels,
                              std::size_t num_classes, std::size_t routing_channels,
                              std::size_t routing_spatial, std::size_t routing_layers,
                              std::size_t gate_hidden,
                              std::array<std::size_t, 3> hsi_channels = {8, 16, 32},
                              std::array<std::size_t, 3> lidar_channels3 = {64, 128, 128});

// ---- parameter containers ---------------------------------------------------

struct Conv2dLayer {
  Tensor w, b;
};
struct Conv3dLayer {
  Tensor w, b;
};
struct DenseLayer {
  Tensor w, b;
};

struct AttentionMaps {
  DenseLayer q_h, k_h, v_h, q_l, k_l, v_l;
};

struct BlockParams {
  BlockKind kind = BlockKind::Icb;
  std::optional<AttentionMaps> attn;  // BSAB / BCAB
  Conv2dLayer conv;                   // 3x3, padding 1
  std::optional<DenseLayer> gate1, gate2;  // soft router only
};

struct Parameter {
  std::string name;
  Tensor tensor;
};

// ---- routing-space operations (free functions; the model composes them) ------

std::pair<Tensor, Tensor> bilinear_values(const Tensor& q_h, const Tensor& v_h, const Tensor& q_l,
                                          const Tensor& v_l, Tape* tape = nullptr);
// rows of softmax(q k^T / sqrt(d)) applied to b; all operands (c, d)
Tensor attention_channel(const Tensor& q, const Tensor& k, const Tensor& b, Tape* tape = nullptr);
// b reweighted over spatial positions by softmax(q^T k / sqrt(c)) rows
Tensor attention_spatial(const Tensor& q, const Tensor& k, const Tensor& b, Tape* tape = nullptr);

std::pair<Tensor, Tensor> bca_channel(const Tensor& f_h, const Tensor& f_l,
                                      const AttentionMaps& maps, AttentionKind kind,
                                      Tape* tape = nullptr);
std::pair<Tensor, Tensor> bca_spatial(const Tensor& f_h, const Tensor& f_l,
                                      const AttentionMaps& maps, AttentionKind kind,
                                      Tape* tape = nullptr);

Tensor bsab_forward(const Tensor& f_h, const Tensor& f_l, const std::optional<Tensor>& x,
                    const BlockParams& params, AttentionKind kind, Tape* tape = nullptr);
Tensor bcab_forward(const Tensor& f_h, const Tensor& f_l, const std::optional<Tensor>& x,
                    const BlockParams& params, AttentionKind kind, Tape* tape = nullptr);
Tensor icb_forward(const Tensor& f_h, const Tensor& f_l, const std::optional<Tensor>& x,
                   const BlockParams& params, Tape* tape = nullptr);

// w = max(0, tanh(FC2(ReLU(FC1(flatten(f_h + f_l + x))))))
Tensor routing_gate(const Tensor& f_h, const Tensor& f_l, const std::optional<Tensor>& x,
                    const DenseLayer& fc1, const DenseLayer& fc2, Tape* tape = nullptr);

// X_target = sum_j gates[j][target] * h[j]
Tensor aggregate(const std::vector<Tensor>& h, const std::vector<Tensor>& gates,
                 std::size_t target, Tape* tape = nullptr);

// ---- traces -------------------------------------------------------------------

struct RoutingTrace {
  // gates[layer][block] = the 3 emitted path probabilities; rows of disabled
  // blocks stay zero. Layer-count entries, 3 blocks, 3 entries each.
  std::vector<std::array<std::array<double, 3>, 3>> gates;
};

struct RouteEdge {
  std::size_t layer = 0;  // 0-based routing layer of the source block
  std::size_t from = 0;   // source block index
  std::size_t to = 0;     // destination block index (layer L-1 rows are the
                          // terminal gate entries kept for symmetric analysis)
  double weight = 0.0;
};

std::vector<RouteEdge> extract_paths(const RoutingTrace& trace, double threshold);

struct RoutingSummary {
  std::size_t samples = 0;
  double threshold = 0.3;
  // usage[layer][block]: fraction of samples in which the block emits at
  // least one edge above threshold
  std::vector<std::array<double, 3>> usage;
  // per class label (1-based key): edge activation counts
  std::map<std::uint16_t, std::map<std::string, std::size_t>> class_histograms;
};

RoutingSummary summarize_routes(const std::vector<RoutingTrace>& traces,
                                const std::vector<std::uint16_t>& labels, double threshold);

// ---- the assembled network -------------------------------------------------------

// Per-entry gate overrides used by the structural-identity tests; entries
// left unset keep the computed value.
struct GatePin {
  std::array<std::optional<double>, 3> entries{};
  static GatePin all(double v) {
    GatePin p;
    p.entries = {v, v, v};
    return p;
  }
  static GatePin one_hot(std::size_t target) {
    GatePin p;
    p.entries = {0.0, 0.0, 0.0};
    p.entries[target] = 1.0;
    return p;
  }
};
using GatePinMap = std::map<std::pair<std::size_t, std::size_t>, GatePin>;

struct ForwardOptions {
  const GatePinMap* pinned_gates = nullptr;
  // blocks included in the final mean; defaults to the enabled set
  const std::vector<BlockKind>* final_blocks = nullptr;
};

struct ForwardResult {
  Tensor logits;
  RoutingTrace trace;
};

struct CostReport {
  std::size_t param_count = 0;
  std::size_t flops_per_sample = 0;  // 2 * multiply-accumulates, conv/FC/attention matmuls
};

struct LayerRow {
  std::string name;
  std::string input;
  std::string output;
  std::string kernel;
};

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { Io, BadMagic, BadVersion, Truncated, Mismatch };
  CheckpointError(Kind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

class DcmNet {
 public:
  DcmNet(ModelConfig cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  Tensor* find_parameter(const std::string& name);

  ForwardResult forward(const Tensor& hsi_patch, const Tensor& lidar_patch, Tape* tape = nullptr,
                        const ForwardOptions& opts = {}) const;

  // Encoder stages, exposed so the calculation units can be driven and
  // cross-checked in isolation.
  std::array<Tensor, 3> encode_hsi(const Tensor& hsi_patch, Tape* tape = nullptr) const;
  std::array<Tensor, 3> encode_lidar(const Tensor& lidar_patch, Tape* tape = nullptr) const;
  struct ProjectedFeatures {
    std::vector<Tensor> h, l;  // per routing layer, each (c, s, s)
  };
  ProjectedFeatures project_features(const Tensor& hsi_patch, const Tensor& lidar_patch,
                                     Tape* tape = nullptr) const;
  const BlockParams& block(std::size_t layer, BlockKind kind) const;
  const DenseLayer& head() const { return head_; }

  bool has_preproc() const { return preproc_.has_value(); }
  const PcaModel& pca() const;
  const Standardizer& standardizer() const;
  void set_preproc(PcaModel pca, Standardizer stats);

  CostReport cost() const;
  std::vector<LayerRow> inspect_rows() const;

  // "DYNM" checkpoint container, f64 payloads, lossless round trip.
  void save(const std::string& path) const;
  static DcmNet load(const std::string& path);

 private:
  void register_tensor(const std::string& name, Tensor t);
  Tensor init_tensor(const std::string& name, Shape shape, std::size_t fan_in,
                     std::uint64_t seed);

  ModelConfig cfg_;
  ShapePlan plan_;
  std::array<Conv3dLayer, 3> hsi_enc_;
  std::array<Conv2dLayer, 3> lidar_enc_;
  // projectors for the encoder levels the routing space consumes
  std::array<std::optional<Conv2dLayer>, 3> proj_hsi_;
  std::array<std::optional<Conv2dLayer>, 3> proj_lidar_;
  // per routing layer, per canonical block index (disabled -> nullopt)
  std::vector<std::array<std::optional<BlockParams>, 3>> layers_;
  DenseLayer head_;
  std::vector<Parameter> params_;

  struct Preproc {
    PcaModel pca;
    Standardizer stats;
  };
  std::optional<Preproc> preproc_;
};

}  // namespace dcmnet
