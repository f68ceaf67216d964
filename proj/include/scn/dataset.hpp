#pragma once

#include "scn/image.hpp"
#include "scn/random.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace scn {

enum class Split { train, val, test };

const char* to_string(Split split);
Split parse_split(const std::string& name);

struct DatasetMeta {
  std::string source;             // "mnist", "mnist_large_scale", "cifar10", ...
  std::string split;              // "train" / "val" / "test" or empty for raw sources
  std::string sampling;           // human-readable scale spec, e.g. "fixed(2)"
  std::uint64_t seed = 0;
  std::uint32_t source_crc = 0;   // CRC-32 over the source pixels and labels
};

/// Uniformly sized images with class labels.
struct LabeledSet {
  std::vector<ImageF> images;
  std::vector<int> labels;
  int num_classes = 10;
  DatasetMeta meta;
  /// Per-image object scale for generated sets (empty for raw sources).
  std::vector<double> scales;

  std::size_t size() const { return images.size(); }
  /// Throws if sizes disagree, images differ in geometry or labels fall
  /// outside [0, num_classes).
  void validate() const;
  LabeledSet subset(std::size_t begin, std::size_t end) const;
};

/// Scale distribution for generated data: a fixed factor, or log-uniform on
/// [s_min, s_max].
struct ScaleSampling {
  enum class Mode { fixed, log_uniform };

  Mode mode = Mode::fixed;
  double scale = 1.0;
  double s_min = 1.0;
  double s_max = 1.0;
  std::uint64_t seed = 0;

  static ScaleSampling fixed(double s, std::uint64_t seed = 0) { return {Mode::fixed, s, s, s, seed}; }
  static ScaleSampling log_uniform(double lo, double hi, std::uint64_t seed) {
    return {Mode::log_uniform, 0.0, lo, hi, seed};
  }

  void validate() const;
  std::string describe() const;
};

/// Deterministic draw of n scale factors from `rng`.
std::vector<double> sample_scales(const ScaleSampling& sampling, std::size_t n, Rng& rng);
/// Same, using the stream derived from sampling.seed.
std::vector<double> sample_scales(const ScaleSampling& sampling, std::size_t n);

// ---------------------------------------------------------------------------
// Source ingestion

/// IDX image/label pair (gzip-compressed files are read transparently).
LabeledSet load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path);

/// CIFAR-10 binary batches: 3073-byte records (label, then R, G, B planes of 32x32).
LabeledSet load_cifar_batches(const std::vector<std::filesystem::path>& batch_files);

std::uint32_t crc32_of(const LabeledSet& set);

// ---------------------------------------------------------------------------
// MNIST Large Scale

struct LargeScaleParams {
  int canvas = 112;
  double sigma_per_scale = 7.0 / 8.0;
  double gain = 0.02;
  double offset = 128.0;
};

/// One 28x28 digit (raw 0..255) rendered at scale factor s: bicubic resample,
/// clip to [0, 256], centre into the canvas with zero padding (or cropping),
/// Gaussian smoothing with sigma = 7s/8, [0, 256] -> [0, 255], arctan squash.
Image render_large_scale(const Image& digit, double s, const LargeScaleParams& params = {});

/// Source items of a split: train = all but the last `validation_count`
/// training items, val = those last items, test = the test source.
LabeledSet select_split(const LabeledSet& train_source, const LabeledSet& test_source, Split split,
                        std::size_t validation_count = 10000);

/// Applies render_large_scale to every image of an already selected split.
/// Scales are drawn from the stream derived from (sampling.seed, split).
LabeledSet make_mnist_large_scale(const LabeledSet& source, const ScaleSampling& sampling, Split split,
                                  const LargeScaleParams& params = {});

/// Rescaled CIFAR-10 test copy: bilinear resample about the centre onto
/// 32x32, mirrored at the border; s must lie in [0.5, 2].
LabeledSet make_rescaled_cifar_test(const LabeledSet& source, double s);

// ---------------------------------------------------------------------------
// Container: <dir>/<split>.scnt + <dir>/<split>.json
// .scnt = "SCNT", u32 version, u32 n, c, h, w, n*c*h*w float32 samples,
// n int32 labels, n float64 scales (all little-endian).

void write_labeled_set(const std::filesystem::path& dir, const std::string& name, const LabeledSet& set);
LabeledSet read_labeled_set(const std::filesystem::path& dir, const std::string& name);

constexpr int kPipelineVersion = 1;

}  // namespace scn
