#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "checking.hpp"
#include "dcmnet/train.hpp"
#include "doctest.h"

using namespace dcmnet;
using testutil::grads_match;
using testutil::random_tensor;

namespace {

SynthSpec small_synth() {
  SynthSpec spec;
  spec.height = 24;
  spec.width = 24;
  spec.bands = 8;
  spec.classes = 3;
  spec.train_per_class = 8;
  spec.seed = 7;
  return spec;
}

ModelConfig small_model() {
  return make_model_config(8, 4, 11, 1, 3, 8, 3, 3, 4, {2, 2, 2}, {2, 2, 2});
}

TrainConfig quick_train(std::size_t epochs) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.batch_size = 16;
  cfg.seed = 5;
  cfg.augment = false;
  return cfg;
}

// second, scalar implementation of the three metrics, long-double arithmetic
void metrics_oracle(const std::vector<std::size_t>& cm, std::size_t c, double& oa, double& aa,
                    double& kappa) {
  long double n = 0.0L, diag = 0.0L;
  std::vector<long double> row(c, 0.0L), col(c, 0.0L);
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      const long double v = static_cast<long double>(cm[i * c + j]);
      n += v;
      row[i] += v;
      col[j] += v;
      if (i == j) diag += v;
    }
  oa = static_cast<double>(diag / n);
  long double recall = 0.0L;
  std::size_t support = 0;
  for (std::size_t i = 0; i < c; ++i) {
    if (row[i] > 0.0L) {
      recall += (static_cast<long double>(cm[i * c + i]) / row[i]);
      ++support;
    }
  }
  aa = static_cast<double>(recall / static_cast<long double>(support));
  long double cross = 0.0L;
  for (std::size_t i = 0; i < c; ++i) cross += row[i] * col[i];
  const long double denom = n * n - cross;
  kappa = denom == 0.0L ? (diag == n ? 1.0 : 0.0)
                        : static_cast<double>((n * diag - cross) / denom);
}

}  // namespace

TEST_CASE("cross entropy: saturated, uniform and gradient cases") {
  std::vector<double> saturated(15, 0.0);
  saturated[4] = 1000.0;
  Tensor hot = Tensor::from_data({15}, saturated);
  CHECK(cross_entropy(hot, 5).scalar() == doctest::Approx(0.0).epsilon(1e-12));

  Tensor uniform = Tensor::zeros({15});
  CHECK(cross_entropy(uniform, 3).scalar() == doctest::Approx(std::log(15.0)).epsilon(1e-12));
  CHECK(std::log(15.0) == doctest::Approx(2.7081).epsilon(1e-4));

  CHECK_THROWS_AS(cross_entropy(uniform, 0), std::invalid_argument);
  CHECK_THROWS_AS(cross_entropy(uniform, 16), std::invalid_argument);

  Rng rng(401);
  Tensor logits = random_tensor({7}, rng, -2, 2);
  logits.set_requires_grad(true);
  Tape tape;
  tape.backward(cross_entropy(logits, 3, &tape));

  // analytic gradient: softmax - onehot
  Tensor sm = softmax(logits, 0);
  for (std::size_t i = 0; i < 7; ++i) {
    const double want = sm.values()[i] - (i == 2 ? 1.0 : 0.0);
    CHECK(logits.grad()[i] == doctest::Approx(want).epsilon(1e-10));
  }
  Tensor fd = finite_diff_grad(
      [&](const Tensor& p) { return cross_entropy(p, 3).scalar(); }, logits);
  CHECK(grads_match(logits.grad(), fd, 1e-6));
}

TEST_CASE("plain gradient descent reproduces closed-form iterates") {
  Tensor w = Tensor::from_data({1}, {5.0});
  w.set_requires_grad(true);
  std::vector<Parameter> params = {{"w", w}};
  Optimizer opt(OptimizerKind::Sgd, 0.1);

  double expected = 5.0;
  for (int step = 0; step < 25; ++step) {
    Optimizer::zero_grad(params);
    Tape tape;
    Tensor diff = add(w, Tensor::full({1}, -3.0), &tape);
    tape.backward(sum(mul(diff, diff, &tape), &tape));
    opt.step(params);
    expected = expected - 0.1 * 2.0 * (expected - 3.0);
    CHECK(w.values()[0] == doctest::Approx(expected).epsilon(1e-12));
  }
}

TEST_CASE("zero learning rate leaves parameters untouched") {
  SceneCube cube = generate_synthetic(small_synth());
  DcmNet model(small_model(), 3);
  std::vector<std::vector<double>> before;
  for (const Parameter& p : model.parameters()) before.push_back(p.tensor.values());

  TrainConfig cfg = quick_train(2);
  cfg.learning_rate = 0.0;
  train(model, cube, cfg);
  for (std::size_t i = 0; i < before.size(); ++i) {
    CHECK(model.parameters()[i].tensor.values() == before[i]);
  }
}

TEST_CASE("one optimizer step on a fixed batch does not increase its loss") {
  SceneCube cube = generate_synthetic(small_synth());
  PcaModel pca = fit_pca(cube, 4);
  Standardizer stats = fit_standardizer(cube, pca);
  auto samples = extract_patches(cube, pca, stats, 11, SplitTag::Train);
  REQUIRE(samples.size() >= 4);

  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    DcmNet model(small_model(), seed);
    auto batch_loss = [&](Tape* tape) {
      Tensor total;
      for (std::size_t i = 0; i < 4; ++i) {
        ForwardResult out = model.forward(samples[i].hsi_patch, samples[i].lidar_patch, tape);
        Tensor l = cross_entropy(out.logits, samples[i].label, tape);
        total = i == 0 ? l : add(total, l, tape);
      }
      return scale(total, 0.25, tape);
    };
    Tape tape;
    Tensor loss = batch_loss(&tape);
    const double before = loss.scalar();
    CHECK(before >= 0.0);
    CHECK(std::isfinite(before));
    tape.backward(loss);
    Optimizer opt(OptimizerKind::Sgd, 1e-4);
    opt.step(model.parameters());
    const double after = batch_loss(nullptr).scalar();
    CHECK(after <= before + 1e-6);
  }
}

TEST_CASE("metrics: perfect, degenerate and random-matrix oracle agreement") {
  EvalReport perfect;
  perfect.num_classes = 4;
  perfect.confusion.assign(16, 0);
  for (int i = 0; i < 4; ++i) perfect.confusion[i * 4 + i] = 25;
  compute_metrics(perfect);
  CHECK(perfect.oa == 1.0);
  CHECK(perfect.aa == 1.0);
  CHECK(perfect.kappa == 1.0);

  EvalReport onecol;
  onecol.num_classes = 2;
  onecol.confusion = {50, 0, 50, 0};
  compute_metrics(onecol);
  CHECK(onecol.oa == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(onecol.aa == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(onecol.kappa == doctest::Approx(0.0).epsilon(1e-15));

  Rng rng(419);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t c = 2 + rng.index(6);
    EvalReport rep;
    rep.num_classes = c;
    rep.confusion.assign(c * c, 0);
    for (std::size_t i = 0; i < c; ++i) {
      bool any = false;
      for (std::size_t j = 0; j < c; ++j) {
        rep.confusion[i * c + j] = rng.index(40);
        any = any || rep.confusion[i * c + j] > 0;
      }
      if (!any) rep.confusion[i * c + i] = 1;  // keep every class supported
    }
    compute_metrics(rep);
    double oa = 0, aa = 0, kappa = 0;
    metrics_oracle(rep.confusion, c, oa, aa, kappa);
    CHECK(std::abs(rep.oa - oa) < 1e-12);
    CHECK(std::abs(rep.aa - aa) < 1e-12);
    CHECK(std::abs(rep.kappa - kappa) < 1e-12);
  }
}

TEST_CASE("parameter accounting convention: a 1->8 channel 3x3 conv holds 80 scalars") {
  ModelConfig cfg = make_model_config(8, 4, 11, 1, 3, 8, 3, 3, 4, {2, 2, 2}, {8, 16, 16});
  DcmNet model(cfg, 1);
  const Tensor* w = model.find_parameter("lidar_encoder.conv1.weight");
  const Tensor* b = model.find_parameter("lidar_encoder.conv1.bias");
  REQUIRE(w);
  REQUIRE(b);
  CHECK(w->size() + b->size() == 80);
}

TEST_CASE("training fits preprocessing, learns, and is bit-deterministic") {
  SceneCube cube = generate_synthetic(small_synth());
  TrainConfig cfg = quick_train(3);

  DcmNet a(small_model(), cfg.seed);
  TrainResult ra = train(a, cube, cfg);
  CHECK(a.has_preproc());
  REQUIRE(ra.loss_history.size() == 3);
  for (double l : ra.loss_history) {
    CHECK(std::isfinite(l));
    CHECK(l >= 0.0);
  }

  DcmNet b(small_model(), cfg.seed);
  TrainResult rb = train(b, cube, cfg);
  CHECK(ra.loss_history == rb.loss_history);
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    CHECK(a.parameters()[i].tensor.values() == b.parameters()[i].tensor.values());
  }

  EvalReport report = evaluate(a, cube, SplitTag::Test);
  CHECK(report.total > 0);
  CHECK(report.oa >= 0.0);
  CHECK(report.oa <= 1.0);

  // modality ablation changes the loss trajectory
  TrainConfig h_only = cfg;
  h_only.modality = ModalityMode::HOnly;
  DcmNet c(small_model(), cfg.seed);
  TrainResult rc = train(c, cube, h_only);
  CHECK(rc.loss_history != ra.loss_history);
}

TEST_CASE("evaluate collects traces aligned with labels") {
  SceneCube cube = generate_synthetic(small_synth());
  DcmNet model(small_model(), 2);
  TrainConfig cfg = quick_train(1);
  train(model, cube, cfg);

  std::vector<RoutingTrace> traces;
  std::vector<std::uint16_t> labels;
  EvalReport report = evaluate(model, cube, SplitTag::Test, ModalityMode::HL, &traces, &labels);
  CHECK(traces.size() == report.total);
  CHECK(labels.size() == report.total);
  for (const RoutingTrace& t : traces) CHECK(t.gates.size() == 3);

  RoutingSummary summary = summarize_routes(traces, labels, 0.3);
  CHECK(summary.samples == traces.size());
}

TEST_CASE("ablation suites enumerate the published grids deterministically") {
  SceneCube cube = generate_synthetic(small_synth());
  ModelConfig base = small_model();
  TrainConfig cfg = quick_train(1);

  const auto blocks = run_ablation(AblationSuite::Blocks, base, cfg, cube);
  REQUIRE(blocks.size() == 7);
  CHECK(blocks[0].variant == "bcab");
  CHECK(blocks[6].variant == "bsab+bcab+icb");

  const auto layers = run_ablation(AblationSuite::Layers, base, cfg, cube);
  REQUIRE(layers.size() == 3);
  CHECK(layers[0].variant == "1-layer");

  const auto attention = run_ablation(AblationSuite::Attention, base, cfg, cube);
  REQUIRE(attention.size() == 2);
  CHECK(attention[0].variant == "self");
  CHECK(attention[1].variant == "bilinear");

  const auto modality = run_ablation(AblationSuite::Modality, base, cfg, cube);
  REQUIRE(modality.size() == 3);
  CHECK(modality[0].variant == "dcmnet-L");
  CHECK(modality[2].variant == "dcmnet-HL");

  const auto router = run_ablation(AblationSuite::Router, base, cfg, cube);
  REQUIRE(router.size() == 3);
  CHECK(router[0].cost.param_count > router[1].cost.param_count);
  CHECK(router[1].cost.param_count > router[2].cost.param_count);

  // identical seed and config reproduce the reports bit for bit
  const auto again = run_ablation(AblationSuite::Attention, base, cfg, cube);
  for (std::size_t i = 0; i < attention.size(); ++i) {
    CHECK(again[i].test_report.confusion == attention[i].test_report.confusion);
    CHECK(again[i].test_report.oa == attention[i].test_report.oa);
  }

  CHECK_THROWS_AS(suite_from_name("bogus"), std::invalid_argument);
  CHECK(suite_from_name("blocks") == AblationSuite::Blocks);
}
