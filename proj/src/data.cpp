#include "dcmnet/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <iostream>
#include <memory>

namespace dcmnet {

void SceneCube::validate() const {
  if (hsi.shape().size() != 3 || lidar.shape().size() != 3) {
    throw std::invalid_argument("cube tensors must be (channels, H, W)");
  }
  if (hsi.shape()[1] != height || hsi.shape()[2] != width || lidar.shape()[1] != height ||
      lidar.shape()[2] != width) {
    throw std::invalid_argument("cube modalities disagree on spatial extent");
  }
  if (labels.size() != height * width || split.size() != height * width) {
    throw std::invalid_argument("label/split grids must be H*W");
  }
  for (std::uint16_t l : labels) {
    if (l > num_classes) throw std::invalid_argument("label exceeds declared class count");
  }
}

// ---- PCA ---------------------------------------------------------------------

namespace {

// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns the
// eigenvalues and, in `vecs`, the eigenvectors as columns. Plenty for the
// band counts seen here (<= a few hundred).
void jacobi_eigh(std::vector<double> a, std::size_t n, std::vector<double>& vals,
                 std::vector<double>& vecs) {
  vecs.assign(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) vecs[i * n + i] = 1.0;

  for (int sweep = 0; sweep < 128; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a[p * n + q] * a[p * n + q];
    if (off < 1e-28 * static_cast<double>(n * n)) break;

    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a[p * n + q];
        if (std::abs(apq) < 1e-300) continue;
        const double theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k * n + p];
          const double akq = a[k * n + q];
          a[k * n + p] = c * akp - s * akq;
          a[k * n + q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p * n + k];
          const double aqk = a[q * n + k];
          a[p * n + k] = c * apk - s * aqk;
          a[q * n + k] = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = vecs[k * n + p];
          const double vkq = vecs[k * n + q];
          vecs[k * n + p] = c * vkp - s * vkq;
          vecs[k * n + q] = s * vkp + c * vkq;
        }
      }
    }
  }
  vals.resize(n);
  for (std::size_t i = 0; i < n; ++i) vals[i] = a[i * n + i];
}

std::vector<std::size_t> split_pixels(const SceneCube& cube, SplitTag tag) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < cube.labels.size(); ++i) {
    if (cube.labels[i] != 0 && cube.split[i] == static_cast<std::uint8_t>(tag)) out.push_back(i);
  }
  return out;
}

}  // namespace

PcaModel fit_pca(const SceneCube& cube, std::size_t k) {
  const std::size_t bands = cube.bands();
  if (k < 1 || k > bands) {
    throw std::invalid_argument("fit_pca: K=" + std::to_string(k) + " out of range [1, " +
                                std::to_string(bands) + "]");
  }
  const std::vector<std::size_t> pixels = split_pixels(cube, SplitTag::Train);
  if (pixels.size() < k) throw std::invalid_argument("fit_pca: fewer training pixels than K");

  const std::size_t hw = cube.height * cube.width;
  const double* hsi = cube.hsi.values().data();

  std::vector<double> mean(bands, 0.0);
  for (std::size_t px : pixels)
    for (std::size_t b = 0; b < bands; ++b) mean[b] += hsi[b * hw + px];
  for (double& m : mean) m /= static_cast<double>(pixels.size());

  std::vector<double> cov(bands * bands, 0.0);
  std::vector<double> centered(bands);
  for (std::size_t px : pixels) {
    for (std::size_t b = 0; b < bands; ++b) centered[b] = hsi[b * hw + px] - mean[b];
    for (std::size_t i = 0; i < bands; ++i) {
      const double ci = centered[i];
      for (std::size_t j = i; j < bands; ++j) cov[i * bands + j] += ci * centered[j];
    }
  }
  const double denom = static_cast<double>(std::max<std::size_t>(1, pixels.size() - 1));
  for (std::size_t i = 0; i < bands; ++i)
    for (std::size_t j = i; j < bands; ++j) {
      cov[i * bands + j] /= denom;
      cov[j * bands + i] = cov[i * bands + j];
    }

  std::vector<double> vals, vecs;
  jacobi_eigh(cov, bands, vals, vecs);

  std::vector<std::size_t> order(bands);
  for (std::size_t i = 0; i < bands; ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return vals[a] > vals[b]; });

  const double scale = std::max(std::abs(vals[order[0]]), 1.0);
  if (vals[order[k - 1]] < 1e-12 * scale) {
    std::cerr << "fit_pca: covariance rank below K; trailing components are an arbitrary "
                 "orthonormal completion\n";
  }

  PcaModel model;
  model.mean = Tensor::from_data({bands}, mean);
  std::vector<double> comp(k * bands);
  std::vector<double> ev(k);
  for (std::size_t r = 0; r < k; ++r) {
    const std::size_t src = order[r];
    ev[r] = std::max(vals[src], 0.0);
    for (std::size_t b = 0; b < bands; ++b) comp[r * bands + b] = vecs[b * bands + src];
  }
  model.components = Tensor::from_data({k, bands}, std::move(comp));
  model.explained_variance = Tensor::from_data({k}, std::move(ev));
  return model;
}

std::vector<double> PcaModel::project(const double* x) const {
  const std::size_t k = output_dim();
  const std::size_t bands = input_dim();
  std::vector<double> y(k, 0.0);
  const double* c = components.values().data();
  const double* mu = mean.values().data();
  for (std::size_t r = 0; r < k; ++r) {
    double acc = 0.0;
    for (std::size_t b = 0; b < bands; ++b) acc += c[r * bands + b] * (x[b] - mu[b]);
    y[r] = acc;
  }
  return y;
}

std::vector<double> PcaModel::reconstruct(const std::vector<double>& y) const {
  const std::size_t k = output_dim();
  const std::size_t bands = input_dim();
  std::vector<double> x(mean.values());
  const double* c = components.values().data();
  for (std::size_t r = 0; r < k; ++r)
    for (std::size_t b = 0; b < bands; ++b) x[b] += c[r * bands + b] * y[r];
  return x;
}

// ---- standardization -----------------------------------------------------------

Standardizer fit_standardizer(const SceneCube& cube, const PcaModel& pca) {
  const std::vector<std::size_t> pixels = split_pixels(cube, SplitTag::Train);
  if (pixels.empty()) throw std::invalid_argument("fit_standardizer: empty train split");
  const std::size_t hw = cube.height * cube.width;
  const std::size_t k = pca.output_dim();
  const std::size_t cl = cube.lidar_channels();
  const std::size_t bands = cube.bands();
  const double* hsi = cube.hsi.values().data();
  const double* lid = cube.lidar.values().data();

  Standardizer st;
  st.hsi.mean.assign(k, 0.0);
  st.hsi.stddev.assign(k, 0.0);
  st.lidar.mean.assign(cl, 0.0);
  st.lidar.stddev.assign(cl, 0.0);

  std::vector<double> spectrum(bands);
  std::vector<std::vector<double>> proj(pixels.size());
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    for (std::size_t b = 0; b < bands; ++b) spectrum[b] = hsi[b * hw + pixels[i]];
    proj[i] = pca.project(spectrum.data());
    for (std::size_t c = 0; c < k; ++c) st.hsi.mean[c] += proj[i][c];
    for (std::size_t c = 0; c < cl; ++c) st.lidar.mean[c] += lid[c * hw + pixels[i]];
  }
  const double n = static_cast<double>(pixels.size());
  for (double& m : st.hsi.mean) m /= n;
  for (double& m : st.lidar.mean) m /= n;
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    for (std::size_t c = 0; c < k; ++c) {
      const double d = proj[i][c] - st.hsi.mean[c];
      st.hsi.stddev[c] += d * d;
    }
    for (std::size_t c = 0; c < cl; ++c) {
      const double d = lid[c * hw + pixels[i]] - st.lidar.mean[c];
      st.lidar.stddev[c] += d * d;
    }
  }
  for (double& s : st.hsi.stddev) s = std::sqrt(s / n);
  for (double& s : st.lidar.stddev) s = std::sqrt(s / n);
  return st;
}

// ---- patch extraction ------------------------------------------------------------

namespace {

std::size_t reflect_index(long i, long n) {
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
  }
  return static_cast<std::size_t>(i);
}

}  // namespace

Tensor mirror_window(const Tensor& grid, std::size_t row, std::size_t col, std::size_t p) {
  const std::size_t ch = grid.shape()[0];
  const long h = static_cast<long>(grid.shape()[1]);
  const long w = static_cast<long>(grid.shape()[2]);
  if (static_cast<long>(p) >= 2 * h || static_cast<long>(p) >= 2 * w) {
    throw std::invalid_argument("mirror_window: patch larger than reflectable extent");
  }
  const long half = static_cast<long>(p) / 2;
  Tensor out = Tensor::zeros({ch, p, p});
  const double* g = grid.values().data();
  double* o = out.values_mut().data();
  for (std::size_t c = 0; c < ch; ++c) {
    for (std::size_t rr = 0; rr < p; ++rr) {
      const std::size_t sr =
          reflect_index(static_cast<long>(row) - half + static_cast<long>(rr), h);
      for (std::size_t cc = 0; cc < p; ++cc) {
        const std::size_t sc =
            reflect_index(static_cast<long>(col) - half + static_cast<long>(cc), w);
        o[(c * p + rr) * p + cc] = g[(c * static_cast<std::size_t>(h) + sr) * w + sc];
      }
    }
  }
  return out;
}

std::vector<PatchPair> extract_patches(const SceneCube& cube, const PcaModel& pca,
                                       const Standardizer& stats, std::size_t p, SplitTag split) {
  if (p % 2 == 0) throw std::invalid_argument("extract_patches: patch size must be odd");
  const std::vector<std::size_t> pixels = split_pixels(cube, split);
  if (pixels.empty()) throw std::invalid_argument("extract_patches: empty split");

  const std::size_t k = pca.output_dim();
  const std::size_t cl = cube.lidar_channels();
  const std::size_t bands = cube.bands();

  std::vector<PatchPair> out;
  out.reserve(pixels.size());
  std::vector<double> spectrum(bands);
  for (std::size_t px : pixels) {
    const std::size_t row = px / cube.width;
    const std::size_t col = px % cube.width;

    Tensor raw = mirror_window(cube.hsi, row, col, p);
    Tensor hsi_patch = Tensor::zeros({k, p, p});
    for (std::size_t rr = 0; rr < p; ++rr) {
      for (std::size_t cc = 0; cc < p; ++cc) {
        for (std::size_t b = 0; b < bands; ++b) spectrum[b] = raw.values()[(b * p + rr) * p + cc];
        const std::vector<double> proj = pca.project(spectrum.data());
        for (std::size_t c = 0; c < k; ++c) {
          const double sd = stats.hsi.stddev[c] > 1e-12 ? stats.hsi.stddev[c] : 1.0;
          hsi_patch.values_mut()[(c * p + rr) * p + cc] = (proj[c] - stats.hsi.mean[c]) / sd;
        }
      }
    }

    Tensor lidar_patch = mirror_window(cube.lidar, row, col, p);
    for (std::size_t c = 0; c < cl; ++c) {
      const double sd = stats.lidar.stddev[c] > 1e-12 ? stats.lidar.stddev[c] : 1.0;
      for (std::size_t i = 0; i < p * p; ++i) {
        double& v = lidar_patch.values_mut()[c * p * p + i];
        v = (v - stats.lidar.mean[c]) / sd;
      }
    }

    out.push_back(PatchPair{hsi_patch, lidar_patch, cube.labels[px], row, col});
  }
  return out;
}

std::vector<PatchPair> extract_patches(const SceneCube& cube, const PcaModel& pca, std::size_t p,
                                       SplitTag split) {
  return extract_patches(cube, pca, fit_standardizer(cube, pca), p, split);
}

// ---- augmentation ------------------------------------------------------------------

namespace {

Tensor flip_tensor(const Tensor& t, bool hflip, bool vflip) {
  const std::size_t ch = t.shape()[0], h = t.shape()[1], w = t.shape()[2];
  Tensor out = Tensor::zeros(t.shape());
  for (std::size_t c = 0; c < ch; ++c)
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t cc = 0; cc < w; ++cc) {
        const std::size_t sr = vflip ? h - 1 - r : r;
        const std::size_t sc = hflip ? w - 1 - cc : cc;
        out.values_mut()[(c * h + r) * w + cc] = t.values()[(c * h + sr) * w + sc];
      }
  return out;
}

void add_channel_noise(Tensor& t, Rng& rng, double sigma) {
  const std::size_t ch = t.shape()[0], hw = t.shape()[1] * t.shape()[2];
  for (std::size_t c = 0; c < ch; ++c) {
    double mean = 0.0, var = 0.0;
    for (std::size_t i = 0; i < hw; ++i) mean += t.values()[c * hw + i];
    mean /= static_cast<double>(hw);
    for (std::size_t i = 0; i < hw; ++i) {
      const double d = t.values()[c * hw + i] - mean;
      var += d * d;
    }
    const double sd = std::sqrt(var / static_cast<double>(hw));
    if (sd <= 0.0) continue;
    for (std::size_t i = 0; i < hw; ++i) t.values_mut()[c * hw + i] += rng.normal() * sigma * sd;
  }
}

}  // namespace

PatchPair apply_flips(const PatchPair& sample, bool hflip, bool vflip) {
  if (!hflip && !vflip) return sample;
  PatchPair out = sample;
  out.hsi_patch = flip_tensor(sample.hsi_patch, hflip, vflip);
  out.lidar_patch = flip_tensor(sample.lidar_patch, hflip, vflip);
  return out;
}

PatchPair augment(const PatchPair& sample, Rng& rng, double noise_sigma) {
  if (noise_sigma < 0.0) throw std::invalid_argument("augment: noise_sigma must be >= 0");
  const bool hflip = rng.uniform() < 0.5;
  const bool vflip = rng.uniform() < 0.5;
  PatchPair out = apply_flips(sample, hflip, vflip);
  if (noise_sigma > 0.0) {
    out.hsi_patch = out.hsi_patch.clone();
    out.lidar_patch = out.lidar_patch.clone();
    add_channel_noise(out.hsi_patch, rng, noise_sigma);
    add_channel_noise(out.lidar_patch, rng, noise_sigma);
  }
  return out;
}

// ---- synthetic scenes -----------------------------------------------------------------

namespace {

double quantize_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

std::vector<std::vector<double>> default_prototypes(std::size_t classes, std::size_t bands) {
  // Distinct smooth curves; classes (0,1) and (2,3) reuse a curve so they are
  // spectrally confusable, everything from class 4 on gets its own.
  std::size_t proto_count = 0;
  std::vector<std::size_t> assignment(classes);
  for (std::size_t c = 0; c < classes; ++c) {
    assignment[c] = (c < 4) ? c / 2 : c - 2;
    proto_count = std::max(proto_count, assignment[c] + 1);
  }
  std::vector<std::vector<double>> curves(proto_count, std::vector<double>(bands, 0.0));
  for (std::size_t pidx = 0; pidx < proto_count; ++pidx) {
    const double center = static_cast<double>(bands - 1) * static_cast<double>(pidx + 1) /
                          static_cast<double>(proto_count + 1);
    const double width = std::max(1.0, static_cast<double>(bands) / 8.0);
    for (std::size_t b = 0; b < bands; ++b) {
      const double z = (static_cast<double>(b) - center) / width;
      curves[pidx][b] = 0.2 + std::exp(-0.5 * z * z);
    }
  }
  std::vector<std::vector<double>> out(classes);
  for (std::size_t c = 0; c < classes; ++c) out[c] = curves[assignment[c]];
  return out;
}

std::vector<double> default_heights(std::size_t classes) {
  // First four alternate low/high so the shared-spectrum pairs separate by
  // height; the rest share one height (spectrally separable instead).
  static const double base[4] = {2.0, 20.0, 5.0, 25.0};
  std::vector<double> h(classes, 10.0);
  for (std::size_t c = 0; c < classes && c < 4; ++c) h[c] = base[c];
  return h;
}

}  // namespace

SceneCube generate_synthetic(const SynthSpec& spec) {
  if (spec.classes < 2) throw std::invalid_argument("generate_synthetic: need >= 2 classes");
  if (spec.bands < 1 || spec.lidar_channels < 1) {
    throw std::invalid_argument("generate_synthetic: need >= 1 band and lidar channel");
  }
  const std::size_t C = spec.classes, H = spec.height, W = spec.width;
  const std::size_t hw = H * W;

  std::vector<std::vector<double>> protos =
      spec.prototypes.empty() ? default_prototypes(C, spec.bands) : spec.prototypes;
  std::vector<double> heights = spec.heights.empty() ? default_heights(C) : spec.heights;
  if (protos.size() != C || heights.size() != C) {
    throw std::invalid_argument("generate_synthetic: prototypes/heights must match class count");
  }

  Rng layout_rng(stream_seed(spec.seed, "synth.layout"));
  std::vector<std::uint16_t> labels(hw, 0);
  const std::size_t block = std::max<std::size_t>(1, spec.region_size);
  for (std::size_t br = 0; br < H; br += block) {
    for (std::size_t bc = 0; bc < W; bc += block) {
      const std::uint16_t cls = static_cast<std::uint16_t>(1 + layout_rng.index(C));
      for (std::size_t r = br; r < std::min(H, br + block); ++r)
        for (std::size_t c = bc; c < std::min(W, bc + block); ++c) labels[r * W + c] = cls;
    }
  }

  Rng pixel_rng(stream_seed(spec.seed, "synth.pixels"));
  std::vector<double> hsi(spec.bands * hw);
  std::vector<double> lidar(spec.lidar_channels * hw);
  for (std::size_t px = 0; px < hw; ++px) {
    const std::size_t cls = labels[px] - 1;
    for (std::size_t b = 0; b < spec.bands; ++b) {
      hsi[b * hw + px] = quantize_f32(protos[cls][b] + pixel_rng.normal() * spec.spectral_noise);
    }
    for (std::size_t c = 0; c < spec.lidar_channels; ++c) {
      // extra channels are derived elevation products at reduced scale
      const double scale = 1.0 / static_cast<double>(c + 1);
      const double offset = static_cast<double>(c) * 0.5;
      lidar[c * hw + px] = quantize_f32(heights[cls] * scale + offset +
                                        pixel_rng.normal() * spec.height_noise * scale);
    }
  }

  Rng split_rng(stream_seed(spec.seed, "synth.split"));
  std::vector<std::uint8_t> split(hw, static_cast<std::uint8_t>(SplitTag::None));
  for (std::size_t cls = 1; cls <= C; ++cls) {
    std::vector<std::size_t> members;
    for (std::size_t px = 0; px < hw; ++px)
      if (labels[px] == cls) members.push_back(px);
    split_rng.shuffle(members);
    const std::size_t n_train = std::min(spec.train_per_class, members.size() / 2);
    for (std::size_t i = 0; i < members.size(); ++i) {
      split[members[i]] =
          static_cast<std::uint8_t>(i < n_train ? SplitTag::Train : SplitTag::Test);
    }
  }

  SceneCube cube;
  cube.hsi = Tensor::from_data({spec.bands, H, W}, std::move(hsi));
  cube.lidar = Tensor::from_data({spec.lidar_channels, H, W}, std::move(lidar));
  cube.labels = std::move(labels);
  cube.split = std::move(split);
  cube.height = H;
  cube.width = W;
  cube.num_classes = C;
  cube.validate();
  return cube;
}

// ---- DYNF io -------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'D', 'Y', 'N', 'F'};
constexpr std::uint16_t kVersion = 1;

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void write_all(std::FILE* f, const void* data, std::size_t n, const std::string& path) {
  if (std::fwrite(data, 1, n, f) != n) {
    throw DataFormatError(DataFormatError::Kind::Io, "short write to " + path);
  }
}

void read_all(std::FILE* f, void* data, std::size_t n, const std::string& path) {
  if (std::fread(data, 1, n, f) != n) {
    throw DataFormatError(DataFormatError::Kind::Truncated, "dataset file truncated: " + path);
  }
}

template <typename T>
void write_pod(std::FILE* f, T v, const std::string& path) {
  write_all(f, &v, sizeof(T), path);
}

template <typename T>
T read_pod(std::FILE* f, const std::string& path) {
  T v{};
  read_all(f, &v, sizeof(T), path);
  return v;
}

}  // namespace

void save_dataset(const SceneCube& cube, const std::string& path) {
  cube.validate();
  const std::string tmp = path + ".tmp";
  {
    FilePtr f(std::fopen(tmp.c_str(), "wb"));
    if (!f) throw DataFormatError(DataFormatError::Kind::Io, "cannot open " + tmp);
    write_all(f.get(), kMagic, 4, tmp);
    write_pod<std::uint16_t>(f.get(), kVersion, tmp);
    write_pod<std::uint16_t>(f.get(), 0, tmp);  // flags
    write_pod<std::uint32_t>(f.get(), static_cast<std::uint32_t>(cube.height), tmp);
    write_pod<std::uint32_t>(f.get(), static_cast<std::uint32_t>(cube.width), tmp);
    write_pod<std::uint32_t>(f.get(), static_cast<std::uint32_t>(cube.bands()), tmp);
    write_pod<std::uint32_t>(f.get(), static_cast<std::uint32_t>(cube.lidar_channels()), tmp);
    write_pod<std::uint32_t>(f.get(), static_cast<std::uint32_t>(cube.num_classes), tmp);

    std::vector<float> payload(cube.hsi.size());
    for (std::size_t i = 0; i < payload.size(); ++i)
      payload[i] = static_cast<float>(cube.hsi.values()[i]);
    write_all(f.get(), payload.data(), payload.size() * sizeof(float), tmp);
    payload.resize(cube.lidar.size());
    for (std::size_t i = 0; i < payload.size(); ++i)
      payload[i] = static_cast<float>(cube.lidar.values()[i]);
    write_all(f.get(), payload.data(), payload.size() * sizeof(float), tmp);
    write_all(f.get(), cube.labels.data(), cube.labels.size() * sizeof(std::uint16_t), tmp);
    write_all(f.get(), cube.split.data(), cube.split.size(), tmp);
    if (std::fflush(f.get()) != 0) {
      throw DataFormatError(DataFormatError::Kind::Io, "flush failed for " + tmp);
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw DataFormatError(DataFormatError::Kind::Io, "cannot move " + tmp + " to " + path);
}

SceneCube load_dataset(const std::string& path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw DataFormatError(DataFormatError::Kind::Io, "cannot open " + path);

  char magic[4];
  read_all(f.get(), magic, 4, path);
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw DataFormatError(DataFormatError::Kind::BadMagic, "not a DYNF dataset: " + path);
  }
  const auto version = read_pod<std::uint16_t>(f.get(), path);
  if (version != kVersion) {
    throw DataFormatError(DataFormatError::Kind::BadVersion,
                          "unsupported DYNF version " + std::to_string(version) + " in " + path);
  }
  (void)read_pod<std::uint16_t>(f.get(), path);  // flags
  const std::size_t h = read_pod<std::uint32_t>(f.get(), path);
  const std::size_t w = read_pod<std::uint32_t>(f.get(), path);
  const std::size_t bands = read_pod<std::uint32_t>(f.get(), path);
  const std::size_t cl = read_pod<std::uint32_t>(f.get(), path);
  const std::size_t classes = read_pod<std::uint32_t>(f.get(), path);
  const std::size_t hw = h * w;

  SceneCube cube;
  cube.height = h;
  cube.width = w;
  cube.num_classes = classes;

  std::vector<float> payload(bands * hw);
  read_all(f.get(), payload.data(), payload.size() * sizeof(float), path);
  std::vector<double> hsi(payload.begin(), payload.end());
  cube.hsi = Tensor::from_data({bands, h, w}, std::move(hsi));

  payload.resize(cl * hw);
  read_all(f.get(), payload.data(), payload.size() * sizeof(float), path);
  std::vector<double> lidar(payload.begin(), payload.end());
  cube.lidar = Tensor::from_data({cl, h, w}, std::move(lidar));

  cube.labels.resize(hw);
  read_all(f.get(), cube.labels.data(), hw * sizeof(std::uint16_t), path);
  cube.split.resize(hw);
  read_all(f.get(), cube.split.data(), hw, path);
  cube.validate();
  return cube;
}

}  // namespace dcmnet
