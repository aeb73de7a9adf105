#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "checking.hpp"
#include "dcmnet/data.hpp"
#include "doctest.h"

using namespace dcmnet;
using testutil::random_tensor;

namespace {

SceneCube random_cube(Rng& rng, std::size_t bands = 5, std::size_t h = 8, std::size_t w = 8,
                      std::size_t classes = 3) {
  SceneCube cube;
  cube.height = h;
  cube.width = w;
  cube.num_classes = classes;
  std::vector<double> hsi(bands * h * w), lidar(h * w);
  for (double& v : hsi) v = static_cast<double>(static_cast<float>(rng.uniform(-2, 2)));
  for (double& v : lidar) v = static_cast<double>(static_cast<float>(rng.uniform(0, 30)));
  cube.hsi = Tensor::from_data({bands, h, w}, std::move(hsi));
  cube.lidar = Tensor::from_data({1, h, w}, std::move(lidar));
  cube.labels.resize(h * w);
  cube.split.resize(h * w);
  for (std::size_t i = 0; i < h * w; ++i) {
    cube.labels[i] = static_cast<std::uint16_t>(1 + rng.index(classes));
    cube.split[i] = static_cast<std::uint8_t>(i % 2 == 0 ? SplitTag::Train : SplitTag::Test);
  }
  return cube;
}

// nearest-prototype classifier over per-dimension z-scored features; the
// independent oracle used to check the planted cross-modal confusions
double nearest_prototype_oa(const SceneCube& cube, bool use_hsi, bool use_lidar) {
  const std::size_t hw = cube.height * cube.width;
  const std::size_t bands = cube.bands(), cl = cube.lidar_channels();
  const std::size_t dims = (use_hsi ? bands : 0) + (use_lidar ? cl : 0);

  auto feature = [&](std::size_t px, std::vector<double>& out) {
    out.clear();
    if (use_hsi)
      for (std::size_t b = 0; b < bands; ++b) out.push_back(cube.hsi.values()[b * hw + px]);
    if (use_lidar)
      for (std::size_t c = 0; c < cl; ++c) out.push_back(cube.lidar.values()[c * hw + px]);
  };

  std::vector<double> mean(dims, 0.0), sd(dims, 0.0);
  std::size_t n_train = 0;
  std::vector<double> f;
  for (std::size_t px = 0; px < hw; ++px) {
    if (cube.split[px] != static_cast<std::uint8_t>(SplitTag::Train)) continue;
    feature(px, f);
    for (std::size_t d = 0; d < dims; ++d) mean[d] += f[d];
    ++n_train;
  }
  for (double& m : mean) m /= static_cast<double>(n_train);
  for (std::size_t px = 0; px < hw; ++px) {
    if (cube.split[px] != static_cast<std::uint8_t>(SplitTag::Train)) continue;
    feature(px, f);
    for (std::size_t d = 0; d < dims; ++d) sd[d] += (f[d] - mean[d]) * (f[d] - mean[d]);
  }
  for (double& s : sd) s = std::max(std::sqrt(s / static_cast<double>(n_train)), 1e-9);

  std::vector<std::vector<double>> proto(cube.num_classes, std::vector<double>(dims, 0.0));
  std::vector<std::size_t> counts(cube.num_classes, 0);
  for (std::size_t px = 0; px < hw; ++px) {
    if (cube.split[px] != static_cast<std::uint8_t>(SplitTag::Train)) continue;
    feature(px, f);
    const std::size_t cls = cube.labels[px] - 1;
    for (std::size_t d = 0; d < dims; ++d) proto[cls][d] += (f[d] - mean[d]) / sd[d];
    counts[cls]++;
  }
  for (std::size_t c = 0; c < cube.num_classes; ++c)
    for (double& v : proto[c]) v /= static_cast<double>(std::max<std::size_t>(1, counts[c]));

  std::size_t correct = 0, total = 0;
  for (std::size_t px = 0; px < hw; ++px) {
    if (cube.split[px] != static_cast<std::uint8_t>(SplitTag::Test)) continue;
    feature(px, f);
    double best = 1e300;
    std::size_t best_cls = 0;
    for (std::size_t c = 0; c < cube.num_classes; ++c) {
      double dist = 0.0;
      for (std::size_t d = 0; d < dims; ++d) {
        const double z = (f[d] - mean[d]) / sd[d] - proto[c][d];
        dist += z * z;
      }
      if (dist < best) {
        best = dist;
        best_cls = c;
      }
    }
    if (best_cls + 1 == cube.labels[px]) ++correct;
    ++total;
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

}  // namespace

TEST_CASE("pca recovers a planted 2-D subspace") {
  Rng rng(101);
  const std::size_t bands = 8, h = 10, w = 10;
  std::vector<double> s1(bands), s2(bands);
  for (std::size_t b = 0; b < bands; ++b) {
    s1[b] = std::sin(0.7 * static_cast<double>(b)) + 2.0;
    s2[b] = std::cos(1.3 * static_cast<double>(b)) - 0.5;
  }
  SceneCube cube = random_cube(rng, bands, h, w);
  for (std::size_t px = 0; px < h * w; ++px) {
    const double a = rng.uniform(-1, 1), b2 = rng.uniform(-1, 1);
    for (std::size_t b = 0; b < bands; ++b)
      cube.hsi.values_mut()[b * h * w + px] = a * s1[b] + b2 * s2[b];
  }
  PcaModel pca = fit_pca(cube, 2);
  const std::size_t hw = h * w;
  std::vector<double> x(bands);
  for (std::size_t px = 0; px < hw; ++px) {
    for (std::size_t b = 0; b < bands; ++b) x[b] = cube.hsi.values()[b * hw + px];
    std::vector<double> rec = pca.reconstruct(pca.project(x.data()));
    for (std::size_t b = 0; b < bands; ++b) CHECK(std::abs(rec[b] - x[b]) < 1e-8);
  }
}

TEST_CASE("pca with full rank reproduces centered data") {
  Rng rng(103);
  SceneCube cube = random_cube(rng, 6);
  PcaModel pca = fit_pca(cube, 6);
  const std::size_t hw = cube.height * cube.width;
  std::vector<double> x(6);
  for (std::size_t px = 0; px < hw; px += 7) {
    for (std::size_t b = 0; b < 6; ++b) x[b] = cube.hsi.values()[b * hw + px];
    std::vector<double> rec = pca.reconstruct(pca.project(x.data()));
    for (std::size_t b = 0; b < 6; ++b) CHECK(std::abs(rec[b] - x[b]) < 1e-8);
  }
}

TEST_CASE("pca components are orthonormal with ordered variance") {
  for (std::uint64_t seed = 1; seed <= 50; ++seed) {
    Rng rng(seed);
    SceneCube cube = random_cube(rng, 5);
    PcaModel pca = fit_pca(cube, 4);
    const std::size_t k = 4, bands = 5;
    for (std::size_t i = 0; i < k; ++i) {
      for (std::size_t j = 0; j < k; ++j) {
        double dot = 0.0;
        for (std::size_t b = 0; b < bands; ++b)
          dot += pca.components.values()[i * bands + b] * pca.components.values()[j * bands + b];
        CHECK(std::abs(dot - (i == j ? 1.0 : 0.0)) < 1e-8);
      }
    }
    for (std::size_t i = 0; i + 1 < k; ++i) {
      CHECK(pca.explained_variance.values()[i] >= pca.explained_variance.values()[i + 1]);
    }
  }
}

TEST_CASE("pca projection is a contraction") {
  Rng rng(107);
  SceneCube cube = random_cube(rng, 7);
  PcaModel pca = fit_pca(cube, 3);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> x(7), y(7);
    for (std::size_t b = 0; b < 7; ++b) {
      x[b] = rng.uniform(-3, 3);
      y[b] = rng.uniform(-3, 3);
    }
    std::vector<double> px = pca.project(x.data()), py = pca.project(y.data());
    double dp = 0.0, dx = 0.0;
    for (std::size_t i = 0; i < 3; ++i) dp += (px[i] - py[i]) * (px[i] - py[i]);
    for (std::size_t b = 0; b < 7; ++b) dx += (x[b] - y[b]) * (x[b] - y[b]);
    CHECK(std::sqrt(dp) <= std::sqrt(dx) + 1e-8);
  }
}

TEST_CASE("pca rejects K out of range and Houston-style shapes work") {
  Rng rng(109);
  SceneCube cube = random_cube(rng, 9);
  CHECK_THROWS_AS(fit_pca(cube, 0), std::invalid_argument);
  CHECK_THROWS_AS(fit_pca(cube, 10), std::invalid_argument);

  // shape contract of the paper configuration: 144 bands down to 30, p=11
  SceneCube big = random_cube(rng, 144, 12, 12, 2);
  PcaModel pca = fit_pca(big, 30);
  auto patches = extract_patches(big, pca, 11, SplitTag::Train);
  REQUIRE(!patches.empty());
  CHECK(patches[0].hsi_patch.shape() == Shape{30, 11, 11});
  CHECK(patches[0].lidar_patch.shape() == Shape{1, 11, 11});
}

TEST_CASE("mirror window matches the hand-built reflection oracle") {
  // 4x4 grid, value 10r + c
  std::vector<double> g(16);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c) g[r * 4 + c] = 10.0 * static_cast<double>(r) +
                                                      static_cast<double>(c);
  Tensor grid = Tensor::from_data({1, 4, 4}, g);
  Tensor patch = mirror_window(grid, 0, 0, 3);
  const std::vector<double> want = {11, 10, 11, 1, 0, 1, 11, 10, 11};
  CHECK(patch.values() == want);

  Tensor interior = mirror_window(grid, 2, 2, 3);
  const std::vector<double> want_int = {11, 12, 13, 21, 22, 23, 31, 32, 33};
  CHECK(interior.values() == want_int);
}

TEST_CASE("extract_patches: interior equality, counts, purity, leakage guard") {
  SynthSpec spec;
  spec.height = 24;
  spec.width = 24;
  spec.train_per_class = 10;
  SceneCube cube = generate_synthetic(spec);
  PcaModel pca = fit_pca(cube, 4);
  Standardizer stats = fit_standardizer(cube, pca);

  auto train = extract_patches(cube, pca, 5, SplitTag::Train);
  auto test = extract_patches(cube, pca, 5, SplitTag::Test);

  std::size_t want_train = 0, want_test = 0;
  for (std::size_t i = 0; i < cube.split.size(); ++i) {
    if (cube.labels[i] == 0) continue;
    if (cube.split[i] == 1) ++want_train;
    if (cube.split[i] == 2) ++want_test;
  }
  CHECK(train.size() == want_train);
  CHECK(test.size() == want_test);

  // interior pixel: the patch is the raw window, projected and standardized
  const PatchPair* interior = nullptr;
  for (const auto& s : train) {
    if (s.row >= 2 && s.row < cube.height - 2 && s.col >= 2 && s.col < cube.width - 2) {
      interior = &s;
      break;
    }
  }
  REQUIRE(interior != nullptr);
  const std::size_t hw = cube.height * cube.width;
  std::vector<double> spectrum(cube.bands());
  for (std::size_t rr = 0; rr < 5; ++rr)
    for (std::size_t cc = 0; cc < 5; ++cc) {
      const std::size_t px = (interior->row - 2 + rr) * cube.width + (interior->col - 2 + cc);
      for (std::size_t b = 0; b < cube.bands(); ++b)
        spectrum[b] = cube.hsi.values()[b * hw + px];
      std::vector<double> proj = pca.project(spectrum.data());
      for (std::size_t k = 0; k < 4; ++k) {
        const double want = (proj[k] - stats.hsi.mean[k]) / stats.hsi.stddev[k];
        CHECK(interior->hsi_patch.values()[(k * 5 + rr) * 5 + cc] ==
              doctest::Approx(want).epsilon(1e-12));
      }
    }

  // purity: repeated calls bit-identical
  auto train2 = extract_patches(cube, pca, 5, SplitTag::Train);
  REQUIRE(train2.size() == train.size());
  for (std::size_t i = 0; i < train.size(); ++i) {
    CHECK(train2[i].hsi_patch.values() == train[i].hsi_patch.values());
    CHECK(train2[i].lidar_patch.values() == train[i].lidar_patch.values());
  }

  // train statistics reused verbatim on test: test-split channel means differ from 0
  double mean0 = 0.0;
  for (const auto& s : test) {
    for (std::size_t i = 0; i < 25; ++i) mean0 += s.hsi_patch.values()[i];
  }
  mean0 /= static_cast<double>(test.size() * 25);
  CHECK(std::abs(mean0) > 1e-6);

  CHECK_THROWS_AS(extract_patches(cube, pca, 4, SplitTag::Train), std::invalid_argument);
}

TEST_CASE("augment: identity, involution, cross-modal alignment") {
  SynthSpec spec;
  spec.height = 16;
  spec.width = 16;
  spec.train_per_class = 5;
  SceneCube cube = generate_synthetic(spec);
  PcaModel pca = fit_pca(cube, 3);
  auto patches = extract_patches(cube, pca, 5, SplitTag::Train);
  REQUIRE(!patches.empty());
  PatchPair sample = patches[0];

  PatchPair same = apply_flips(sample, false, false);
  CHECK(same.hsi_patch.values() == sample.hsi_patch.values());
  CHECK(same.lidar_patch.values() == sample.lidar_patch.values());

  PatchPair twice = apply_flips(apply_flips(sample, true, false), true, false);
  CHECK(twice.hsi_patch.values() == sample.hsi_patch.values());
  CHECK(twice.lidar_patch.values() == sample.lidar_patch.values());

  // plant an off-center marker in both modalities; flips must keep them co-located
  PatchPair marked = sample;
  marked.hsi_patch = sample.hsi_patch.clone();
  marked.lidar_patch = sample.lidar_patch.clone();
  marked.hsi_patch.values_mut()[0 * 25 + 1] = 99.0;    // (row 0, col 1)
  marked.lidar_patch.values_mut()[0 * 25 + 1] = 99.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    PatchPair aug = augment(marked, rng, 0.0);
    std::size_t hsi_pos = 0, lidar_pos = 0;
    for (std::size_t i = 0; i < 25; ++i) {
      if (aug.hsi_patch.values()[i] == 99.0) hsi_pos = i;
      if (aug.lidar_patch.values()[i] == 99.0) lidar_pos = i;
    }
    CHECK(hsi_pos == lidar_pos);
  }

  // sigma=0 with whatever flips is still label-preserving and finite
  Rng rng(5);
  PatchPair noisy = augment(sample, rng, 0.05);
  CHECK(noisy.label == sample.label);
  CHECK(noisy.hsi_patch.all_finite());
}

TEST_CASE("synthetic cubes are deterministic and carry planted confusions") {
  SynthSpec spec;
  SceneCube a = generate_synthetic(spec);
  SceneCube b = generate_synthetic(spec);
  CHECK(a.hsi.values() == b.hsi.values());
  CHECK(a.lidar.values() == b.lidar.values());
  CHECK(a.labels == b.labels);
  CHECK(a.split == b.split);

  SynthSpec other = spec;
  other.seed = 8;
  SceneCube c = generate_synthetic(other);
  CHECK(a.hsi.values() != c.hsi.values());

  const double oa_hsi = nearest_prototype_oa(a, true, false);
  const double oa_joint = nearest_prototype_oa(a, true, true);
  CHECK(oa_hsi < oa_joint);
  CHECK(oa_joint > 0.9);

  // noise-free cube: spectrally separable classes classify perfectly
  SynthSpec clean = spec;
  clean.spectral_noise = 0.0;
  clean.height_noise = 0.0;
  SceneCube d = generate_synthetic(clean);
  CHECK(nearest_prototype_oa(d, true, true) == doctest::Approx(1.0));
}

TEST_CASE("dynf round trip and error paths") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "dcmnet_data_test";
  fs::create_directories(dir);
  const std::string path = (dir / "cube.dynf").string();

  Rng rng(211);
  SceneCube cube = random_cube(rng, 4, 6, 7, 3);
  save_dataset(cube, path);
  SceneCube back = load_dataset(path);
  CHECK(back.hsi.values() == cube.hsi.values());
  CHECK(back.lidar.values() == cube.lidar.values());
  CHECK(back.labels == cube.labels);
  CHECK(back.split == cube.split);
  CHECK(back.num_classes == cube.num_classes);

  // corrupted magic
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.write("XXXX", 4);
  }
  try {
    load_dataset(path);
    FAIL("expected bad magic");
  } catch (const DataFormatError& e) {
    CHECK(e.kind() == DataFormatError::Kind::BadMagic);
    CHECK(std::string(e.what()).find(path) != std::string::npos);
  }

  // version mismatch
  save_dataset(cube, path);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(4);
    std::uint16_t v = 9;
    f.write(reinterpret_cast<const char*>(&v), 2);
  }
  try {
    load_dataset(path);
    FAIL("expected bad version");
  } catch (const DataFormatError& e) {
    CHECK(e.kind() == DataFormatError::Kind::BadVersion);
  }

  // truncation mid-payload
  save_dataset(cube, path);
  const auto full_size = fs::file_size(path);
  fs::resize_file(path, full_size / 2);
  try {
    load_dataset(path);
    FAIL("expected truncation");
  } catch (const DataFormatError& e) {
    CHECK(e.kind() == DataFormatError::Kind::Truncated);
  }

  fs::remove_all(dir);
}
