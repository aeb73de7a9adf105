#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "dcmnet/rng.hpp"
#include "dcmnet/tensor.hpp"

namespace dcmnet {

enum class SplitTag : std::uint8_t { None = 0, Train = 1, Test = 2 };

// A co-registered scene: hyperspectral reflectance cube, lidar elevation
// channels, per-pixel labels (0 = unlabeled) and a train/test split mask.
struct SceneCube {
  Tensor hsi;    // (c_bands, H, W)
  Tensor lidar;  // (c_l, H, W)
  std::vector<std::uint16_t> labels;  // H*W row-major
  std::vector<std::uint8_t> split;    // H*W row-major, SplitTag values
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t num_classes = 0;

  std::size_t bands() const { return hsi.shape()[0]; }
  std::size_t lidar_channels() const { return lidar.shape()[0]; }
  void validate() const;
};

struct PcaModel {
  Tensor mean;                // (c_bands)
  Tensor components;          // (K, c_bands), orthonormal rows
  Tensor explained_variance;  // (K), non-increasing

  std::size_t input_dim() const { return mean.shape()[0]; }
  std::size_t output_dim() const { return components.shape()[0]; }
  // y = components (x - mean)
  std::vector<double> project(const double* x) const;
  // x~ = mean + components^T y
  std::vector<double> reconstruct(const std::vector<double>& y) const;
};

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> stddev;
};

// Per-channel z-score parameters fit on the training split only and reused
// verbatim on the test split.
struct Standardizer {
  ChannelStats hsi;    // over PCA-projected channels
  ChannelStats lidar;  // over raw lidar channels
};

struct PatchPair {
  Tensor hsi_patch;    // (K, p, p)
  Tensor lidar_patch;  // (c_l, p, p)
  std::uint16_t label = 0;  // 1..C
  std::size_t row = 0;
  std::size_t col = 0;
};

// Top-K principal components of the per-pixel spectral covariance, fit on
// training-split pixels only.
PcaModel fit_pca(const SceneCube& cube, std::size_t k);

Standardizer fit_standardizer(const SceneCube& cube, const PcaModel& pca);

// p x p window around (row, col) with mirror padding at scene borders.
Tensor mirror_window(const Tensor& grid, std::size_t row, std::size_t col, std::size_t p);

std::vector<PatchPair> extract_patches(const SceneCube& cube, const PcaModel& pca,
                                       const Standardizer& stats, std::size_t p, SplitTag split);
// Convenience form per the module contract: fits the standardizer from the
// cube's train split internally.
std::vector<PatchPair> extract_patches(const SceneCube& cube, const PcaModel& pca, std::size_t p,
                                       SplitTag split);

PatchPair apply_flips(const PatchPair& sample, bool hflip, bool vflip);
// 50/50 horizontal and vertical flips (one coin per axis, shared by both
// modalities) plus Gaussian noise scaled by each channel's std.
PatchPair augment(const PatchPair& sample, Rng& rng, double noise_sigma);

struct SynthSpec {
  std::size_t classes = 6;
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t bands = 20;
  std::size_t lidar_channels = 1;
  std::size_t region_size = 8;  // edge of the square label blocks
  // Optional explicit class design; when empty a built-in set is used in
  // which classes (1,2) and (3,4) share a spectrum but differ in height,
  // and classes 5,6 share a height but differ in spectrum.
  std::vector<std::vector<double>> prototypes;  // per class, length = bands
  std::vector<double> heights;                  // per class, meters
  double spectral_noise = 0.05;
  double height_noise = 0.3;
  std::size_t train_per_class = 100;
  std::uint64_t seed = 7;
};

SceneCube generate_synthetic(const SynthSpec& spec);

class DataFormatError : public std::runtime_error {
 public:
  enum class Kind { Io, BadMagic, BadVersion, Truncated };
  DataFormatError(Kind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

// "DYNF" container, little-endian, f32 payloads.
void save_dataset(const SceneCube& cube, const std::string& path);
SceneCube load_dataset(const std::string& path);

}  // namespace dcmnet
