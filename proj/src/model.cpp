#include "dcmnet/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <memory>
#include <sstream>

#include "dcmnet/rng.hpp"
#include "json.hpp"

namespace dcmnet {

using nlohmann::json;

std::string block_name(BlockKind kind) {
  switch (kind) {
    case BlockKind::Bsab: return "BSAB";
    case BlockKind::Bcab: return "BCAB";
    case BlockKind::Icb: return "ICB";
  }
  return "?";
}

static const std::array<BlockKind, 3> kBlockOrder = {BlockKind::Bsab, BlockKind::Bcab,
                                                     BlockKind::Icb};

bool ModelConfig::block_enabled(BlockKind kind) const {
  return std::find(enabled_blocks.begin(), enabled_blocks.end(), kind) != enabled_blocks.end();
}

// ---- shape planning -----------------------------------------------------------

ShapePlan plan_shapes(const ModelConfig& cfg) {
  ShapePlan plan;
  std::size_t c = 1, d = cfg.pca_components, h = cfg.patch_size, w = cfg.patch_size;
  for (std::size_t i = 0; i < 3; ++i) {
    const Conv3dSpec& spec = cfg.hsi_layers[i];
    if (spec.kd == 0 || spec.kd > d || spec.kh > h || spec.kw > w || spec.channels == 0) {
      throw std::invalid_argument("hsi conv" + std::to_string(i + 1) + " kernel does not fit (" +
                                  std::to_string(c) + ", " + std::to_string(d) + ", " +
                                  std::to_string(h) + ", " + std::to_string(w) + ")");
    }
    c = spec.channels;
    d = d - spec.kd + 1;
    h = h - spec.kh + 1;
    w = w - spec.kw + 1;
    plan.hsi[i] = {c, d, h, w};
  }
  c = cfg.lidar_channels;
  h = cfg.patch_size;
  w = cfg.patch_size;
  for (std::size_t i = 0; i < 3; ++i) {
    const Conv2dSpec& spec = cfg.lidar_layers[i];
    if (spec.kh == 0 || spec.kh > h || spec.kw > w || spec.channels == 0) {
      throw std::invalid_argument("lidar conv" + std::to_string(i + 1) +
                                  " kernel does not fit (" + std::to_string(c) + ", " +
                                  std::to_string(h) + ", " + std::to_string(w) + ")");
    }
    c = spec.channels;
    h = h - spec.kh + 1;
    w = w - spec.kw + 1;
    plan.lidar[i] = {c, h, w};
  }
  // projector kernel P - s + 1 maps a P x P level to s x s
  for (std::size_t level = 0; level < 3; ++level) {
    const bool used = level >= cfg.encoder_level(0);
    const std::size_t ph = plan.hsi[level][2];
    const std::size_t lh = plan.lidar[level][1];
    if (used && (ph < cfg.routing_spatial || lh < cfg.routing_spatial)) {
      throw std::invalid_argument("projector at level " + std::to_string(level + 1) +
                                  " cannot reach routing size " +
                                  std::to_string(cfg.routing_spatial) + " from extents " +
                                  std::to_string(ph) + "/" + std::to_string(lh));
    }
    plan.proj_hsi_kernel[level] = ph >= cfg.routing_spatial ? ph - cfg.routing_spatial + 1 : 0;
    plan.proj_lidar_kernel[level] = lh >= cfg.routing_spatial ? lh - cfg.routing_spatial + 1 : 0;
  }
  return plan;
}

void ModelConfig::validate() const {
  if (num_classes < 2) throw std::invalid_argument("config: need at least 2 classes");
  if (patch_size % 2 == 0) throw std::invalid_argument("config: patch size must be odd");
  if (pca_components < 1 || pca_components > input_bands) {
    throw std::invalid_argument("config: pca components out of range");
  }
  if (routing_layers < 1 || routing_layers > 3) {
    throw std::invalid_argument("config: routing layers must be 1..3");
  }
  if (routing_channels < 1 || routing_spatial < 1) {
    throw std::invalid_argument("config: routing feature sizes must be positive");
  }
  if (enabled_blocks.empty()) throw std::invalid_argument("config: no blocks enabled");
  for (std::size_t i = 0; i < enabled_blocks.size(); ++i) {
    for (std::size_t j = i + 1; j < enabled_blocks.size(); ++j) {
      if (enabled_blocks[i] == enabled_blocks[j]) {
        throw std::invalid_argument("config: duplicate enabled block");
      }
    }
  }
  if (router == RouterMode::Soft && gate_hidden < 1) {
    throw std::invalid_argument("config: soft router needs gate_hidden >= 1");
  }
  plan_shapes(*this);
}

// ---- config json ----------------------------------------------------------------

static std::string router_name(RouterMode mode) {
  switch (mode) {
    case RouterMode::Soft: return "soft";
    case RouterMode::UniformAverage: return "uniform_average";
    case RouterMode::Off: return "off";
  }
  return "?";
}

std::string config_to_json(const ModelConfig& cfg) {
  json j;
  j["attention"] = cfg.attention == AttentionKind::Bilinear ? "bilinear" : "self";
  json blocks = json::array();
  for (BlockKind k : kBlockOrder) {
    if (cfg.block_enabled(k)) {
      std::string n = block_name(k);
      std::transform(n.begin(), n.end(), n.begin(), ::tolower);
      blocks.push_back(n);
    }
  }
  j["enabled_blocks"] = blocks;
  j["gate_hidden"] = cfg.gate_hidden;
  json hsi = json::array();
  for (const auto& l : cfg.hsi_layers) {
    hsi.push_back({{"channels", l.channels}, {"kd", l.kd}, {"kh", l.kh}, {"kw", l.kw}});
  }
  j["hsi_layers"] = hsi;
  j["input_bands"] = cfg.input_bands;
  j["lidar_channels"] = cfg.lidar_channels;
  json lid = json::array();
  for (const auto& l : cfg.lidar_layers) {
    lid.push_back({{"channels", l.channels}, {"kh", l.kh}, {"kw", l.kw}});
  }
  j["lidar_layers"] = lid;
  j["num_classes"] = cfg.num_classes;
  j["patch_size"] = cfg.patch_size;
  j["pca_components"] = cfg.pca_components;
  j["router"] = router_name(cfg.router);
  j["routing_channels"] = cfg.routing_channels;
  j["routing_layers"] = cfg.routing_layers;
  j["routing_spatial"] = cfg.routing_spatial;
  return j.dump();
}

ModelConfig config_from_json(const std::string& text) {
  json j = json::parse(text);
  ModelConfig cfg;
  const std::string att = j.at("attention").get<std::string>();
  if (att == "bilinear") {
    cfg.attention = AttentionKind::Bilinear;
  } else if (att == "self") {
    cfg.attention = AttentionKind::SelfAttention;
  } else {
    throw std::invalid_argument("config: unknown attention kind '" + att + "'");
  }
  cfg.enabled_blocks.clear();
  for (const auto& b : j.at("enabled_blocks")) {
    const std::string n = b.get<std::string>();
    if (n == "bsab") {
      cfg.enabled_blocks.push_back(BlockKind::Bsab);
    } else if (n == "bcab") {
      cfg.enabled_blocks.push_back(BlockKind::Bcab);
    } else if (n == "icb") {
      cfg.enabled_blocks.push_back(BlockKind::Icb);
    } else {
      throw std::invalid_argument("config: unknown block '" + n + "'");
    }
  }
  cfg.gate_hidden = j.at("gate_hidden").get<std::size_t>();
  for (std::size_t i = 0; i < 3; ++i) {
    const auto& l = j.at("hsi_layers").at(i);
    cfg.hsi_layers[i] =
        Conv3dSpec{l.at("channels").get<std::size_t>(), l.at("kd").get<std::size_t>(),
                   l.at("kh").get<std::size_t>(), l.at("kw").get<std::size_t>()};
    const auto& m = j.at("lidar_layers").at(i);
    cfg.lidar_layers[i] = Conv2dSpec{m.at("channels").get<std::size_t>(),
                                     m.at("kh").get<std::size_t>(), m.at("kw").get<std::size_t>()};
  }
  cfg.input_bands = j.at("input_bands").get<std::size_t>();
  cfg.lidar_channels = j.at("lidar_channels").get<std::size_t>();
  cfg.num_classes = j.at("num_classes").get<std::size_t>();
  cfg.patch_size = j.at("patch_size").get<std::size_t>();
  cfg.pca_components = j.at("pca_components").get<std::size_t>();
  const std::string router = j.at("router").get<std::string>();
  if (router == "soft") {
    cfg.router = RouterMode::Soft;
  } else if (router == "uniform_average") {
    cfg.router = RouterMode::UniformAverage;
  } else if (router == "off") {
    cfg.router = RouterMode::Off;
  } else {
    throw std::invalid_argument("config: unknown router mode '" + router + "'");
  }
  cfg.routing_channels = j.at("routing_channels").get<std::size_t>();
  cfg.routing_layers = j.at("routing_layers").get<std::size_t>();
  cfg.routing_spatial = j.at("routing_spatial").get<std::size_t>();
  cfg.validate();
  return cfg;
}

// ---- profiles ----------------------------------------------------------------------

ModelConfig make_model_config(std::size_t input_bands, std::size_t pca_components,
                              std::size_t patch_size, std::size_t lidar_channels,
                              std::size_t num_classes, std::size_t routing_channels,
                              std::size_t routing_spatial, std::size_t routing_layers,
                              std::size_t gate_hidden, std::array<std::size_t, 3> hsi_channels,
                              std::array<std::size_t, 3> lidar_channels3) {
  ModelConfig cfg;
  cfg.input_bands = input_bands;
  cfg.pca_components = pca_components;
  cfg.patch_size = patch_size;
  cfg.lidar_channels = lidar_channels;
  cfg.num_classes = num_classes;
  cfg.routing_channels = routing_channels;
  cfg.routing_spatial = routing_spatial;
  cfg.routing_layers = routing_layers;
  cfg.gate_hidden = gate_hidden;

  const std::array<std::size_t, 3> depth_kernels = {9, 7, 5};
  std::size_t d = pca_components, h = patch_size;
  for (std::size_t i = 0; i < 3; ++i) {
    const std::size_t kd = std::min(depth_kernels[i], d);
    const std::size_t ks = std::min<std::size_t>(3, h);
    cfg.hsi_layers[i] = Conv3dSpec{hsi_channels[i], kd, ks, ks};
    d = d - kd + 1;
    h = h - ks + 1;
  }
  const std::array<std::size_t, 3> lidar_kernels = {3, 3, 5};
  h = patch_size;
  for (std::size_t i = 0; i < 3; ++i) {
    const std::size_t ks = std::min(lidar_kernels[i], h);
    cfg.lidar_layers[i] = Conv2dSpec{lidar_channels3[i], ks, ks};
    h = h - ks + 1;
  }
  cfg.validate();
  return cfg;
}

ModelConfig houston2013_config() { return make_model_config(144, 30, 11, 1, 15, 128, 3, 3, 256); }

ModelConfig synthetic_default_config() {
  return make_model_config(20, 8, 11, 1, 6, 16, 3, 3, 32, {4, 8, 8}, {8, 16, 16});
}

ModelConfig tiny_gradcheck_config() {
  return make_model_config(8, 4, 11, 1, 3, 8, 3, 3, 4, {2, 2, 2}, {2, 2, 2});
}

// ---- routing-space operations ---------------------------------------------------------

std::pair<Tensor, Tensor> bilinear_values(const Tensor& q_h, const Tensor& v_h, const Tensor& q_l,
                                          const Tensor& v_l, Tape* tape) {
  return {mul(v_h, q_l, tape), mul(v_l, q_h, tape)};
}

Tensor attention_channel(const Tensor& q, const Tensor& k, const Tensor& b, Tape* tape) {
  const double d = static_cast<double>(q.shape()[1]);
  Tensor scores = scale(matmul(q, transpose2d(k, tape), tape), 1.0 / std::sqrt(d), tape);
  return matmul(softmax(scores, 1, tape), b, tape);
}

Tensor attention_spatial(const Tensor& q, const Tensor& k, const Tensor& b, Tape* tape) {
  const double c = static_cast<double>(q.shape()[0]);
  Tensor scores = scale(matmul(transpose2d(q, tape), k, tape), 1.0 / std::sqrt(c), tape);
  Tensor a = softmax(scores, 1, tape);
  return matmul(b, transpose2d(a, tape), tape);
}

namespace {

Tensor apply_map(const Tensor& f, const DenseLayer& map, Tape* tape) {
  return linear_rows(f, map.w, map.b, tape);
}

struct QkvPair {
  Tensor q_h, k_h, b_h, q_l, k_l, b_l;
};

QkvPair make_qkv(const Tensor& f_h, const Tensor& f_l, const AttentionMaps& maps,
                 AttentionKind kind, Tape* tape) {
  const std::size_t c = f_h.shape()[0];
  const std::size_t d = f_h.shape()[1] * f_h.shape()[2];
  Tensor fh = reshape(f_h, {c, d}, tape);
  Tensor fl = reshape(f_l, {c, d}, tape);
  QkvPair out;
  out.q_h = apply_map(fh, maps.q_h, tape);
  out.k_h = apply_map(fh, maps.k_h, tape);
  Tensor v_h = apply_map(fh, maps.v_h, tape);
  out.q_l = apply_map(fl, maps.q_l, tape);
  out.k_l = apply_map(fl, maps.k_l, tape);
  Tensor v_l = apply_map(fl, maps.v_l, tape);
  if (kind == AttentionKind::Bilinear) {
    auto [b_h, b_l] = bilinear_values(out.q_h, v_h, out.q_l, v_l, tape);
    out.b_h = b_h;
    out.b_l = b_l;
  } else {
    out.b_h = v_h;
    out.b_l = v_l;
  }
  return out;
}

Tensor add_optional(Tensor base, const std::optional<Tensor>& x, Tape* tape) {
  // an absent inbound aggregate is the first-layer "null" input, i.e. zeros
  return x ? add(base, *x, tape) : base;
}

}  // namespace

std::pair<Tensor, Tensor> bca_channel(const Tensor& f_h, const Tensor& f_l,
                                      const AttentionMaps& maps, AttentionKind kind, Tape* tape) {
  QkvPair qkv = make_qkv(f_h, f_l, maps, kind, tape);
  Tensor ca_h = attention_channel(qkv.q_h, qkv.k_h, qkv.b_h, tape);
  Tensor ca_l = attention_channel(qkv.q_l, qkv.k_l, qkv.b_l, tape);
  return {reshape(ca_h, f_h.shape(), tape), reshape(ca_l, f_l.shape(), tape)};
}

std::pair<Tensor, Tensor> bca_spatial(const Tensor& f_h, const Tensor& f_l,
                                      const AttentionMaps& maps, AttentionKind kind, Tape* tape) {
  QkvPair qkv = make_qkv(f_h, f_l, maps, kind, tape);
  Tensor ca_h = attention_spatial(qkv.q_h, qkv.k_h, qkv.b_h, tape);
  Tensor ca_l = attention_spatial(qkv.q_l, qkv.k_l, qkv.b_l, tape);
  return {reshape(ca_h, f_h.shape(), tape), reshape(ca_l, f_l.shape(), tape)};
}

Tensor bsab_forward(const Tensor& f_h, const Tensor& f_l, const std::optional<Tensor>& x,
                    const BlockParams& params, AttentionKind kind, Tape* tape) {
  auto [ca_h, ca_l] = bca_spatial(f_h, f_l, *params.attn, kind, tape);
  Tensor s = add_optional(add(ca_h, ca_l, tape), x, tape);
  return conv2d(s, params.conv.w, params.conv.b, 1, 1, tape);
}

Tensor bcab_forward(const Tensor& f_h, const Tensor& f_l, const std::optional<Tensor>& x,
                    const BlockParams& params, AttentionKind kind, Tape* tape) {
  auto [ca_h, ca_l] = bca_channel(f_h, f_l, *params.attn, kind, tape);
  Tensor s = add_optional(add(ca_h, ca_l, tape), x, tape);
  return conv2d(s, params.conv.w, params.conv.b, 1, 1, tape);
}

Tensor icb_forward(const Tensor& f_h, const Tensor& f_l, const std::optional<Tensor>& x,
                   const BlockParams& params, Tape* tape) {
  Tensor s = add_optional(add(f_h, f_l, tape), x, tape);
  return conv2d(s, params.conv.w, params.conv.b, 1, 1, tape);
}

Tensor routing_gate(const Tensor& f_h, const Tensor& f_l, const std::optional<Tensor>& x,
                    const DenseLayer& fc1, const DenseLayer& fc2, Tape* tape) {
  Tensor s = add_optional(add(f_h, f_l, tape), x, tape);
  Tensor hidden =
      activation(linear(flatten(s, tape), fc1.w, fc1.b, tape), Activation::Relu, tape);
  return activation(linear(hidden, fc2.w, fc2.b, tape), Activation::RestrictedTanh, tape);
}

Tensor aggregate(const std::vector<Tensor>& h, const std::vector<Tensor>& gates,
                 std::size_t target, Tape* tape) {
  if (h.empty() || h.size() != gates.size()) {
    throw std::invalid_argument("aggregate: needs matching block outputs and gates");
  }
  Tensor acc;
  for (std::size_t j = 0; j < h.size(); ++j) {
    Tensor term = scale_by(h[j], element_at(gates[j], target, tape), tape);
    acc = j == 0 ? term : add(acc, term, tape);
  }
  return acc;
}

// ---- traces --------------------------------------------------------------------------

std::vector<RouteEdge> extract_paths(const RoutingTrace& trace, double threshold) {
  if (threshold < 0.0 || threshold > 1.0) {
    throw std::invalid_argument("extract_paths: threshold must be in [0, 1]");
  }
  std::vector<RouteEdge> edges;
  for (std::size_t k = 0; k < trace.gates.size(); ++k) {
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t j = 0; j < 3; ++j) {
        const double w = trace.gates[k][i][j];
        if (w >= threshold) edges.push_back(RouteEdge{k, i, j, w});
      }
    }
  }
  return edges;
}

RoutingSummary summarize_routes(const std::vector<RoutingTrace>& traces,
                                const std::vector<std::uint16_t>& labels, double threshold) {
  RoutingSummary summary;
  summary.samples = traces.size();
  summary.threshold = threshold;
  if (traces.empty()) return summary;
  const std::size_t layers = traces[0].gates.size();
  summary.usage.assign(layers, {0.0, 0.0, 0.0});
  for (std::size_t s = 0; s < traces.size(); ++s) {
    const std::vector<RouteEdge> edges = extract_paths(traces[s], threshold);
    std::vector<std::array<bool, 3>> used(layers, {false, false, false});
    for (const RouteEdge& e : edges) {
      used[e.layer][e.from] = true;
      if (s < labels.size()) {
        std::ostringstream key;
        key << (e.layer + 1) << ":" << block_name(static_cast<BlockKind>(e.from)) << "->"
            << block_name(static_cast<BlockKind>(e.to));
        summary.class_histograms[labels[s]][key.str()]++;
      }
    }
    for (std::size_t k = 0; k < layers; ++k)
      for (std::size_t i = 0; i < 3; ++i)
        if (used[k][i]) summary.usage[k][i] += 1.0;
  }
  for (auto& layer : summary.usage)
    for (double& u : layer) u /= static_cast<double>(traces.size());
  return summary;
}

// ---- model ---------------------------------------------------------------------------

Tensor DcmNet::init_tensor(const std::string& name, Shape shape, std::size_t fan_in,
                           std::uint64_t seed) {
  Rng rng(stream_seed(seed, "init." + name));
  const double bound = std::sqrt(1.0 / static_cast<double>(std::max<std::size_t>(1, fan_in)));
  std::vector<double> v(shape_size(shape));
  for (double& x : v) x = rng.uniform(-bound, bound);
  Tensor t = Tensor::from_data(std::move(shape), std::move(v));
  t.set_requires_grad(true);
  register_tensor(name, t);
  return t;
}

void DcmNet::register_tensor(const std::string& name, Tensor t) {
  params_.push_back(Parameter{name, std::move(t)});
}

Tensor* DcmNet::find_parameter(const std::string& name) {
  for (Parameter& p : params_) {
    if (p.name == name) return &p.tensor;
  }
  return nullptr;
}

DcmNet::DcmNet(ModelConfig cfg, std::uint64_t seed)
    : cfg_(std::move(cfg)), plan_(plan_shapes(cfg_)) {
  cfg_.validate();
  const std::size_t c = cfg_.routing_channels;
  const std::size_t d = cfg_.routing_dim();

  std::size_t in_ch = 1;
  for (std::size_t i = 0; i < 3; ++i) {
    const Conv3dSpec& spec = cfg_.hsi_layers[i];
    const std::string base = "hsi_encoder.conv" + std::to_string(i + 1);
    const std::size_t fan_in = in_ch * spec.kd * spec.kh * spec.kw;
    hsi_enc_[i].w = init_tensor(base + ".weight",
                                {spec.channels, in_ch, spec.kd, spec.kh, spec.kw}, fan_in, seed);
    hsi_enc_[i].b = init_tensor(base + ".bias", {spec.channels}, fan_in, seed);
    in_ch = spec.channels;
  }
  in_ch = cfg_.lidar_channels;
  for (std::size_t i = 0; i < 3; ++i) {
    const Conv2dSpec& spec = cfg_.lidar_layers[i];
    const std::string base = "lidar_encoder.conv" + std::to_string(i + 1);
    const std::size_t fan_in = in_ch * spec.kh * spec.kw;
    lidar_enc_[i].w =
        init_tensor(base + ".weight", {spec.channels, in_ch, spec.kh, spec.kw}, fan_in, seed);
    lidar_enc_[i].b = init_tensor(base + ".bias", {spec.channels}, fan_in, seed);
    in_ch = spec.channels;
  }
  for (std::size_t level = cfg_.encoder_level(0); level < 3; ++level) {
    {
      const std::size_t cin = plan_.hsi[level][0] * plan_.hsi[level][1];
      const std::size_t k = plan_.proj_hsi_kernel[level];
      const std::string base = "projector.hsi.level" + std::to_string(level + 1);
      Conv2dLayer layer;
      layer.w = init_tensor(base + ".weight", {c, cin, k, k}, cin * k * k, seed);
      layer.b = init_tensor(base + ".bias", {c}, cin * k * k, seed);
      proj_hsi_[level] = layer;
    }
    {
      const std::size_t cin = plan_.lidar[level][0];
      const std::size_t k = plan_.proj_lidar_kernel[level];
      const std::string base = "projector.lidar.level" + std::to_string(level + 1);
      Conv2dLayer layer;
      layer.w = init_tensor(base + ".weight", {c, cin, k, k}, cin * k * k, seed);
      layer.b = init_tensor(base + ".bias", {c}, cin * k * k, seed);
      proj_lidar_[level] = layer;
    }
  }

  layers_.resize(cfg_.routing_layers);
  for (std::size_t k = 0; k < cfg_.routing_layers; ++k) {
    for (BlockKind kind : kBlockOrder) {
      if (!cfg_.block_enabled(kind)) continue;
      const std::size_t bi = static_cast<std::size_t>(kind);
      std::string base = "routing.layer" + std::to_string(k + 1) + ".";
      std::string bn = block_name(kind);
      std::transform(bn.begin(), bn.end(), bn.begin(), ::tolower);
      base += bn;

      BlockParams bp;
      bp.kind = kind;
      if (kind != BlockKind::Icb) {
        AttentionMaps maps;
        const char* names[6] = {"q_h", "k_h", "v_h", "q_l", "k_l", "v_l"};
        DenseLayer* slots[6] = {&maps.q_h, &maps.k_h, &maps.v_h,
                                &maps.q_l, &maps.k_l, &maps.v_l};
        for (int m = 0; m < 6; ++m) {
          slots[m]->w = init_tensor(base + "." + names[m] + ".weight", {d, d}, d, seed);
          slots[m]->b = init_tensor(base + "." + names[m] + ".bias", {d}, d, seed);
        }
        bp.attn = maps;
      }
      bp.conv.w = init_tensor(base + ".conv.weight", {c, c, 3, 3}, c * 9, seed);
      bp.conv.b = init_tensor(base + ".conv.bias", {c}, c * 9, seed);
      if (cfg_.router == RouterMode::Soft) {
        DenseLayer fc1, fc2;
        fc1.w = init_tensor(base + ".gate.fc1.weight", {cfg_.gate_hidden, c * d}, c * d, seed);
        fc1.b = init_tensor(base + ".gate.fc1.bias", {cfg_.gate_hidden}, c * d, seed);
        fc2.w = init_tensor(base + ".gate.fc2.weight", {3, cfg_.gate_hidden}, cfg_.gate_hidden,
                            seed);
        fc2.b = init_tensor(base + ".gate.fc2.bias", {3}, cfg_.gate_hidden, seed);
        bp.gate1 = fc1;
        bp.gate2 = fc2;
      }
      layers_[k][bi] = std::move(bp);
    }
  }
  head_.w = init_tensor("head.weight", {cfg_.num_classes, c * d}, c * d, seed);
  head_.b = init_tensor("head.bias", {cfg_.num_classes}, c * d, seed);
}

const PcaModel& DcmNet::pca() const {
  if (!preproc_) throw std::logic_error("model has no preprocessing state");
  return preproc_->pca;
}

const Standardizer& DcmNet::standardizer() const {
  if (!preproc_) throw std::logic_error("model has no preprocessing state");
  return preproc_->stats;
}

void DcmNet::set_preproc(PcaModel pca, Standardizer stats) {
  preproc_ = Preproc{std::move(pca), std::move(stats)};
}

std::array<Tensor, 3> DcmNet::encode_hsi(const Tensor& hsi_patch, Tape* tape) const {
  std::array<Tensor, 3> levels;
  Tensor x3 =
      reshape(hsi_patch, {1, cfg_.pca_components, cfg_.patch_size, cfg_.patch_size}, tape);
  for (std::size_t i = 0; i < 3; ++i) {
    x3 = activation(conv3d(x3, hsi_enc_[i].w, hsi_enc_[i].b, 1, 0, tape), Activation::Relu, tape);
    levels[i] = x3;
  }
  return levels;
}

std::array<Tensor, 3> DcmNet::encode_lidar(const Tensor& lidar_patch, Tape* tape) const {
  std::array<Tensor, 3> levels;
  Tensor x2 = lidar_patch;
  for (std::size_t i = 0; i < 3; ++i) {
    x2 = activation(conv2d(x2, lidar_enc_[i].w, lidar_enc_[i].b, 1, 0, tape), Activation::Relu,
                    tape);
    levels[i] = x2;
  }
  return levels;
}

DcmNet::ProjectedFeatures DcmNet::project_features(const Tensor& hsi_patch,
                                                   const Tensor& lidar_patch, Tape* tape) const {
  const std::array<Tensor, 3> hsi_levels = encode_hsi(hsi_patch, tape);
  const std::array<Tensor, 3> lidar_levels = encode_lidar(lidar_patch, tape);
  ProjectedFeatures out;
  const std::size_t layers = cfg_.routing_layers;
  out.h.resize(layers);
  out.l.resize(layers);
  for (std::size_t k = 0; k < layers; ++k) {
    const std::size_t level = cfg_.encoder_level(k);
    const auto& hs = plan_.hsi[level];
    Tensor merged = reshape(hsi_levels[level], {hs[0] * hs[1], hs[2], hs[3]}, tape);
    out.h[k] = conv2d(merged, proj_hsi_[level]->w, proj_hsi_[level]->b, 1, 0, tape);
    out.l[k] =
        conv2d(lidar_levels[level], proj_lidar_[level]->w, proj_lidar_[level]->b, 1, 0, tape);
  }
  return out;
}

const BlockParams& DcmNet::block(std::size_t layer, BlockKind kind) const {
  if (layer >= layers_.size() || !layers_[layer][static_cast<std::size_t>(kind)]) {
    throw std::invalid_argument("block: no " + block_name(kind) + " at layer " +
                                std::to_string(layer + 1));
  }
  return *layers_[layer][static_cast<std::size_t>(kind)];
}

ForwardResult DcmNet::forward(const Tensor& hsi_patch, const Tensor& lidar_patch, Tape* tape,
                              const ForwardOptions& opts) const {
  const Shape want_hsi = {cfg_.pca_components, cfg_.patch_size, cfg_.patch_size};
  const Shape want_lidar = {cfg_.lidar_channels, cfg_.patch_size, cfg_.patch_size};
  if (hsi_patch.shape() != want_hsi || lidar_patch.shape() != want_lidar) {
    throw std::invalid_argument("forward: expected hsi " + shape_str(want_hsi) + " and lidar " +
                                shape_str(want_lidar) + ", got " + shape_str(hsi_patch.shape()) +
                                " and " + shape_str(lidar_patch.shape()));
  }

  ProjectedFeatures feats = project_features(hsi_patch, lidar_patch, tape);
  std::vector<Tensor>& f_h = feats.h;
  std::vector<Tensor>& f_l = feats.l;
  const std::size_t layers = cfg_.routing_layers;

  RoutingTrace trace;
  trace.gates.assign(layers, {{{0, 0, 0}, {0, 0, 0}, {0, 0, 0}}});

  std::vector<std::size_t> enabled;
  for (BlockKind kind : kBlockOrder) {
    if (cfg_.block_enabled(kind)) enabled.push_back(static_cast<std::size_t>(kind));
  }

  std::array<std::optional<Tensor>, 3> incoming;
  Tensor fused;
  for (std::size_t k = 0; k < layers; ++k) {
    std::array<Tensor, 3> h_out;
    std::array<Tensor, 3> gate_out;
    for (std::size_t bi : enabled) {
      const BlockParams& bp = *layers_[k][bi];
      switch (bp.kind) {
        case BlockKind::Bsab:
          h_out[bi] = bsab_forward(f_h[k], f_l[k], incoming[bi], bp, cfg_.attention, tape);
          break;
        case BlockKind::Bcab:
          h_out[bi] = bcab_forward(f_h[k], f_l[k], incoming[bi], bp, cfg_.attention, tape);
          break;
        case BlockKind::Icb:
          h_out[bi] = icb_forward(f_h[k], f_l[k], incoming[bi], bp, tape);
          break;
      }
      Tensor gate;
      if (cfg_.router == RouterMode::Soft) {
        gate = routing_gate(f_h[k], f_l[k], incoming[bi], *bp.gate1, *bp.gate2, tape);
      } else {
        gate = Tensor::full({3}, 1.0);
      }
      if (opts.pinned_gates) {
        auto it = opts.pinned_gates->find({k, bi});
        if (it != opts.pinned_gates->end()) {
          std::vector<double> pinned = gate.values();
          for (std::size_t j = 0; j < 3; ++j) {
            if (it->second.entries[j]) pinned[j] = *it->second.entries[j];
          }
          gate = Tensor::from_data({3}, std::move(pinned));  // detached constant
        }
      }
      gate_out[bi] = gate;
      for (std::size_t j = 0; j < 3; ++j) trace.gates[k][bi][j] = gate.values()[j];
    }

    if (k + 1 < layers) {
      std::vector<Tensor> h_list, g_list;
      for (std::size_t bi : enabled) {
        h_list.push_back(h_out[bi]);
        g_list.push_back(gate_out[bi]);
      }
      for (std::size_t bi : enabled) incoming[bi] = aggregate(h_list, g_list, bi, tape);
    } else {
      const std::vector<BlockKind>& final_set =
          opts.final_blocks ? *opts.final_blocks : cfg_.enabled_blocks;
      if (final_set.empty()) throw std::invalid_argument("forward: empty final block set");
      Tensor acc;
      std::size_t n = 0;
      for (BlockKind kind : kBlockOrder) {
        if (std::find(final_set.begin(), final_set.end(), kind) == final_set.end()) continue;
        const std::size_t bi = static_cast<std::size_t>(kind);
        if (!cfg_.block_enabled(kind)) {
          throw std::invalid_argument("forward: final block " + block_name(kind) +
                                      " is not enabled");
        }
        acc = n == 0 ? h_out[bi] : add(acc, h_out[bi], tape);
        ++n;
      }
      fused = scale(acc, 1.0 / static_cast<double>(n), tape);
    }
  }

  ForwardResult result;
  result.logits = linear(flatten(fused, tape), head_.w, head_.b, tape);
  result.trace = std::move(trace);
  return result;
}

// ---- cost accounting --------------------------------------------------------------------

CostReport DcmNet::cost() const {
  CostReport report;
  for (const Parameter& p : params_) report.param_count += p.tensor.size();

  std::size_t mac = 0;
  std::size_t in_ch = 1;
  for (std::size_t i = 0; i < 3; ++i) {
    const auto& spec = cfg_.hsi_layers[i];
    const auto& out = plan_.hsi[i];
    mac += out[0] * out[1] * out[2] * out[3] * in_ch * spec.kd * spec.kh * spec.kw;
    in_ch = out[0];
  }
  in_ch = cfg_.lidar_channels;
  for (std::size_t i = 0; i < 3; ++i) {
    const auto& spec = cfg_.lidar_layers[i];
    const auto& out = plan_.lidar[i];
    mac += out[0] * out[1] * out[2] * in_ch * spec.kh * spec.kw;
    in_ch = out[0];
  }
  const std::size_t c = cfg_.routing_channels;
  const std::size_t d = cfg_.routing_dim();
  const std::size_t s = cfg_.routing_spatial;
  for (std::size_t level = cfg_.encoder_level(0); level < 3; ++level) {
    const std::size_t hk = plan_.proj_hsi_kernel[level];
    mac += c * d * (plan_.hsi[level][0] * plan_.hsi[level][1]) * hk * hk;
    const std::size_t lk = plan_.proj_lidar_kernel[level];
    mac += c * d * plan_.lidar[level][0] * lk * lk;
  }
  for (std::size_t k = 0; k < cfg_.routing_layers; ++k) {
    for (BlockKind kind : kBlockOrder) {
      if (!cfg_.block_enabled(kind)) continue;
      if (kind != BlockKind::Icb) {
        mac += 6 * c * d * d;  // q/k/v maps for both streams
        if (kind == BlockKind::Bcab) {
          mac += c * c * d + c * c * d;  // q k^T plus the attention apply
        } else {
          mac += d * d * c + c * d * d;
        }
      }
      mac += (c * s * s) * (c * 9);  // 3x3 block conv, padding 1
      if (cfg_.router == RouterMode::Soft) {
        mac += cfg_.gate_hidden * (c * d) + 3 * cfg_.gate_hidden;
      }
    }
  }
  mac += cfg_.num_classes * (c * d);  // classifier head
  report.flops_per_sample = 2 * mac;
  return report;
}

// ---- inspect ------------------------------------------------------------------------------

namespace {

std::string dims(std::initializer_list<std::size_t> ds) {
  std::ostringstream os;
  os << "(";
  bool first = true;
  for (std::size_t v : ds) {
    if (!first) os << ", ";
    os << v;
    first = false;
  }
  os << ")";
  return os.str();
}

}  // namespace

std::vector<LayerRow> DcmNet::inspect_rows() const {
  std::vector<LayerRow> rows;
  const std::size_t p = cfg_.patch_size;
  const std::size_t c = cfg_.routing_channels;
  const std::size_t s = cfg_.routing_spatial;

  rows.push_back({"PCA (HSI Preprocessing)", dims({cfg_.input_bands, p, p}),
                  dims({cfg_.pca_components, p, p}), "PCA projection"});
  std::array<std::size_t, 4> prev_h = {1, cfg_.pca_components, p, p};
  for (std::size_t i = 0; i < 3; ++i) {
    const auto& spec = cfg_.hsi_layers[i];
    const auto& out = plan_.hsi[i];
    std::ostringstream kernel;
    kernel << "3D CNN (" << spec.kd << "x" << spec.kh << "x" << spec.kw
           << ", stride=1, padding=0)";
    rows.push_back({"3D Conv" + std::to_string(i + 1) + " (HSI Feature Extraction)",
                    dims({prev_h[0], prev_h[1], prev_h[2], prev_h[3]}),
                    dims({out[0], out[1], out[2], out[3]}), kernel.str()});
    prev_h = out;
  }
  std::array<std::size_t, 3> prev_l = {cfg_.lidar_channels, p, p};
  for (std::size_t i = 0; i < 3; ++i) {
    const auto& spec = cfg_.lidar_layers[i];
    const auto& out = plan_.lidar[i];
    std::ostringstream kernel;
    kernel << "2D CNN (" << spec.kh << "x" << spec.kw << ", stride=1, padding=0)";
    rows.push_back({"2D Conv" + std::to_string(i + 1) + " (LiDAR Feature Extraction)",
                    dims({prev_l[0], prev_l[1], prev_l[2]}), dims({out[0], out[1], out[2]}),
                    kernel.str()});
    prev_l = out;
  }
  for (std::size_t level = cfg_.encoder_level(0); level < 3; ++level) {
    const auto& hs = plan_.hsi[level];
    std::ostringstream kh;
    kh << "2D CNN (" << plan_.proj_hsi_kernel[level] << "x" << plan_.proj_hsi_kernel[level]
       << ", stride=1, padding=0)";
    rows.push_back({"Projector (HSI Level " + std::to_string(level + 1) + ")",
                    dims({hs[0] * hs[1], hs[2], hs[3]}), dims({c, s, s}), kh.str()});
    const auto& ls = plan_.lidar[level];
    std::ostringstream kl;
    kl << "2D CNN (" << plan_.proj_lidar_kernel[level] << "x" << plan_.proj_lidar_kernel[level]
       << ", stride=1, padding=0)";
    rows.push_back({"Projector (LiDAR Level " + std::to_string(level + 1) + ")",
                    dims({ls[0], ls[1], ls[2]}), dims({c, s, s}), kl.str()});
  }
  if (cfg_.router == RouterMode::Soft) {
    std::ostringstream kernel;
    kernel << "FC (" << c * cfg_.routing_dim() << "-" << cfg_.gate_hidden << "-3)";
    rows.push_back({"Router (Feature Interactive Blocks Routing)", dims({c, s, s}), "(3)",
                    kernel.str()});
  }
  const std::string pair = dims({c, s, s}) + ", " + dims({c, s, s});
  if (cfg_.block_enabled(BlockKind::Bsab)) {
    rows.push_back({"BSAB (Bilinear Spatial Attention Block)", pair, dims({c, s, s}), "N/A"});
  }
  if (cfg_.block_enabled(BlockKind::Bcab)) {
    rows.push_back({"BCAB (Bilinear Channel Attention Block)", pair, dims({c, s, s}), "N/A"});
  }
  if (cfg_.block_enabled(BlockKind::Icb)) {
    rows.push_back({"ICB (Integration Convolutional Block)", pair, dims({c, s, s}), "N/A"});
  }
  rows.push_back({"Aggregation Layer (Final Output)", dims({c, s, s}),
                  std::to_string(cfg_.num_classes), "N/A"});
  return rows;
}

// ---- checkpoint io ---------------------------------------------------------------------------

namespace {

constexpr char kModelMagic[4] = {'D', 'Y', 'N', 'M'};
constexpr std::uint16_t kModelVersion = 1;

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void ck_write(std::FILE* f, const void* data, std::size_t n, const std::string& path) {
  if (std::fwrite(data, 1, n, f) != n) {
    throw CheckpointError(CheckpointError::Kind::Io, "short write to " + path);
  }
}

void ck_read(std::FILE* f, void* data, std::size_t n, const std::string& path) {
  if (std::fread(data, 1, n, f) != n) {
    throw CheckpointError(CheckpointError::Kind::Truncated, "checkpoint truncated: " + path);
  }
}

template <typename T>
void ck_write_pod(std::FILE* f, T v, const std::string& path) {
  ck_write(f, &v, sizeof(T), path);
}

template <typename T>
T ck_read_pod(std::FILE* f, const std::string& path) {
  T v{};
  ck_read(f, &v, sizeof(T), path);
  return v;
}

void write_entry(std::FILE* f, const std::string& name, const Tensor& t,
                 const std::string& path) {
  ck_write_pod<std::uint32_t>(f, static_cast<std::uint32_t>(name.size()), path);
  ck_write(f, name.data(), name.size(), path);
  ck_write_pod<std::uint32_t>(f, static_cast<std::uint32_t>(t.rank()), path);
  for (std::size_t e : t.shape()) {
    ck_write_pod<std::uint32_t>(f, static_cast<std::uint32_t>(e), path);
  }
  ck_write(f, t.values().data(), t.size() * sizeof(double), path);
}

std::pair<std::string, Tensor> read_entry(std::FILE* f, const std::string& path) {
  const auto name_len = ck_read_pod<std::uint32_t>(f, path);
  std::string name(name_len, '\0');
  ck_read(f, name.data(), name_len, path);
  const auto rank = ck_read_pod<std::uint32_t>(f, path);
  Shape shape(rank);
  for (auto& e : shape) e = ck_read_pod<std::uint32_t>(f, path);
  std::vector<double> payload(shape_size(shape));
  ck_read(f, payload.data(), payload.size() * sizeof(double), path);
  return {std::move(name), Tensor::from_data(std::move(shape), std::move(payload))};
}

Tensor vec_tensor(const std::vector<double>& v) { return Tensor::from_data({v.size()}, v); }

}  // namespace

void DcmNet::save(const std::string& path) const {
  const std::string tmp = path + ".tmp";
  {
    FilePtr f(std::fopen(tmp.c_str(), "wb"));
    if (!f) throw CheckpointError(CheckpointError::Kind::Io, "cannot open " + tmp);
    ck_write(f.get(), kModelMagic, 4, tmp);
    ck_write_pod<std::uint16_t>(f.get(), kModelVersion, tmp);
    ck_write_pod<std::uint16_t>(f.get(), 0, tmp);
    const std::string cfg_json = config_to_json(cfg_);
    ck_write_pod<std::uint32_t>(f.get(), static_cast<std::uint32_t>(cfg_json.size()), tmp);
    ck_write(f.get(), cfg_json.data(), cfg_json.size(), tmp);
    ck_write_pod<std::uint32_t>(f.get(), static_cast<std::uint32_t>(params_.size()), tmp);
    for (const Parameter& p : params_) write_entry(f.get(), p.name, p.tensor, tmp);
    ck_write_pod<std::uint8_t>(f.get(), preproc_ ? 1 : 0, tmp);
    if (preproc_) {
      write_entry(f.get(), "pca.mean", preproc_->pca.mean, tmp);
      write_entry(f.get(), "pca.components", preproc_->pca.components, tmp);
      write_entry(f.get(), "pca.explained_variance", preproc_->pca.explained_variance, tmp);
      write_entry(f.get(), "std.hsi.mean", vec_tensor(preproc_->stats.hsi.mean), tmp);
      write_entry(f.get(), "std.hsi.stddev", vec_tensor(preproc_->stats.hsi.stddev), tmp);
      write_entry(f.get(), "std.lidar.mean", vec_tensor(preproc_->stats.lidar.mean), tmp);
      write_entry(f.get(), "std.lidar.stddev", vec_tensor(preproc_->stats.lidar.stddev), tmp);
    }
    if (std::fflush(f.get()) != 0) {
      throw CheckpointError(CheckpointError::Kind::Io, "flush failed for " + tmp);
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw CheckpointError(CheckpointError::Kind::Io, "cannot move " + tmp + " to " + path);
}

DcmNet DcmNet::load(const std::string& path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw CheckpointError(CheckpointError::Kind::Io, "cannot open " + path);
  char magic[4];
  ck_read(f.get(), magic, 4, path);
  if (std::memcmp(magic, kModelMagic, 4) != 0) {
    throw CheckpointError(CheckpointError::Kind::BadMagic, "not a DYNM checkpoint: " + path);
  }
  const auto version = ck_read_pod<std::uint16_t>(f.get(), path);
  if (version != kModelVersion) {
    throw CheckpointError(CheckpointError::Kind::BadVersion,
                          "unsupported DYNM version " + std::to_string(version));
  }
  (void)ck_read_pod<std::uint16_t>(f.get(), path);
  const auto json_len = ck_read_pod<std::uint32_t>(f.get(), path);
  std::string cfg_json(json_len, '\0');
  ck_read(f.get(), cfg_json.data(), json_len, path);
  ModelConfig cfg;
  try {
    cfg = config_from_json(cfg_json);
  } catch (const std::exception& e) {
    throw CheckpointError(CheckpointError::Kind::Mismatch,
                          std::string("invalid checkpoint config: ") + e.what());
  }

  DcmNet model(cfg, 0);
  const auto count = ck_read_pod<std::uint32_t>(f.get(), path);
  if (count != model.params_.size()) {
    throw CheckpointError(CheckpointError::Kind::Mismatch,
                          "checkpoint parameter count " + std::to_string(count) +
                              " does not match architecture (" +
                              std::to_string(model.params_.size()) + ")");
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    auto [name, tensor] = read_entry(f.get(), path);
    Tensor* dst = model.find_parameter(name);
    if (!dst) {
      throw CheckpointError(CheckpointError::Kind::Mismatch,
                            "checkpoint carries unknown parameter '" + name + "'");
    }
    if (dst->shape() != tensor.shape()) {
      throw CheckpointError(CheckpointError::Kind::Mismatch,
                            "parameter '" + name + "' has shape " + shape_str(tensor.shape()) +
                                ", expected " + shape_str(dst->shape()));
    }
    dst->values_mut() = tensor.values();
  }
  const auto has_preproc = ck_read_pod<std::uint8_t>(f.get(), path);
  if (has_preproc) {
    auto expect = [&](const char* want) -> Tensor {
      auto [name, tensor] = read_entry(f.get(), path);
      if (name != want) {
        throw CheckpointError(CheckpointError::Kind::Mismatch,
                              "expected preprocessing entry '" + std::string(want) + "', got '" +
                                  name + "'");
      }
      return tensor;
    };
    PcaModel pca;
    pca.mean = expect("pca.mean");
    pca.components = expect("pca.components");
    pca.explained_variance = expect("pca.explained_variance");
    Standardizer st;
    st.hsi.mean = expect("std.hsi.mean").values();
    st.hsi.stddev = expect("std.hsi.stddev").values();
    st.lidar.mean = expect("std.lidar.mean").values();
    st.lidar.stddev = expect("std.lidar.stddev").values();
    model.set_preproc(std::move(pca), std::move(st));
  }
  return model;
}

}  // namespace dcmnet
