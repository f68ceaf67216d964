#pragma once

#include "scn/dataset.hpp"
#include "scn/nn.hpp"
#include "scn/scale_channels.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace scn {

/// Thrown for configurations that cannot be run (CLI exit code 2).
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Where the training data comes from. Paths are relative to the data root
/// ($SCN_DATA_ROOT) unless absolute.
struct DataConfig {
  std::string dataset = "mnist_large_scale";  // or "cifar10"
  std::string source = "mnist";               // IDX directory / CIFAR batch directory
  std::size_t train_count = 0;                // 0 = whole training split
  std::size_t validation_count = 500;

  nlohmann::json to_json() const;
  static DataConfig from_json(const nlohmann::json& j);
};

struct RunConfig {
  std::string name = "run";
  /// "cnn" or an aggregation name (fov_max, fov_avg, fov_conc, sw_max).
  std::string architecture = "fov_avg";
  ScaleChannelConfig channels;
  DataConfig data;
  /// Training object sizes; log-uniform sampling is redrawn every epoch.
  ScaleSampling sampling = ScaleSampling::fixed(2.0);
  int epochs = 10;
  std::int64_t steps = 0;  // > 0: stop after this many steps instead
  int batch_size = 128;
  Schedule schedule;
  std::uint64_t seed = 0;
  bool deterministic = true;

  void validate() const;
  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  /// CRC-32 of the canonical JSON, 8 hex digits.
  std::string hash() const;
};

/// Desk-scale defaults for an architecture ("cnn", "fov_max", "fov_avg",
/// "fov_conc", "sw_max") on "mnist_large_scale" or "cifar10"; `full` selects
/// the published budget (50k samples, 20 epochs / 20k steps).
RunConfig preset(const std::string& architecture, const std::string& dataset = "mnist_large_scale",
                 double train_scale = 2.0, bool full = false);

RunConfig load_run_config(const std::filesystem::path& path);

/// Data root: $SCN_DATA_ROOT, else `fallback`.
std::filesystem::path data_root(const std::filesystem::path& fallback = "data");
std::filesystem::path resolve_data_path(const std::string& p);

/// Source items (raw digits / CIFAR images) of a split, with the configured
/// train/validation sizes.
LabeledSet load_source_split(const DataConfig& data, Split split);

/// Test copy of the source test split at object size s: MNIST digits
/// rendered at fixed size s, or CIFAR images rescaled by s. The first
/// `count` items (0 = all); images are in the model's input range.
LabeledSet make_test_set(const DataConfig& data, double s, std::size_t count = 0, std::uint64_t seed = 0);

// ---------------------------------------------------------------------------
// Models

/// Scale-channel model plus the configuration that built it. The plain CNN is
/// the one-channel case (s = 1, channel input = full image).
struct TrainedModel {
  RunConfig config;
  ScaleChannelModel<float> model;
  CheckpointInfo info;
};

ScaleChannelModel<float> build_model(const RunConfig& cfg);
void save_model(const std::filesystem::path& path, const TrainedModel& m, const std::vector<const Adam<float>*>& opts = {});
TrainedModel load_model(const std::filesystem::path& path);

/// Aggregated logits of a whole set in eval mode, in chunks of `batch`.
Tensor<float> predict(ScaleChannelModel<float>& model, const LabeledSet& set, int batch = 100);
double accuracy(ScaleChannelModel<float>& model, const LabeledSet& set, int batch = 100);

// ---------------------------------------------------------------------------
// Training

struct EpochLog {
  int epoch = 0;
  std::int64_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  std::optional<double> val_accuracy;
  double seconds = 0.0;

  nlohmann::json to_json() const;
};

struct TrainResult {
  TrainedModel model;
  std::vector<EpochLog> log;
  std::filesystem::path checkpoint;
};

/// Trains from scratch. With an output directory, writes
/// checkpoint_epochNN.scnk and checkpoint.scnk after every epoch and appends
/// one JSON line per epoch to train_log.jsonl. `progress` sees every epoch.
TrainResult train(const RunConfig& cfg, const std::filesystem::path& out_dir = {},
                  const std::function<void(const EpochLog&)>& progress = {});

// ---------------------------------------------------------------------------
// Evaluation

struct SweepRow {
  double test_scale = 0.0;
  double accuracy = 0.0;
  std::size_t n_test = 0;
};

struct ExperimentRecord {
  std::string config_hash;
  std::string name;
  std::string architecture;
  std::string training;  // sampling description, e.g. "fixed(2)"
  std::vector<SweepRow> rows;
  double seconds = 0.0;
  std::string checkpoint;

  nlohmann::json to_json() const;
  static ExperimentRecord from_json(const nlohmann::json& j);
};

/// File stem of the test set for object size s inside a test directory,
/// e.g. "test_s2", "test_s1.18921".
std::string test_set_name(double s);

/// Test sets at the given sizes from `dir` (written by generate-dataset);
/// throws std::runtime_error naming the first missing one.
std::vector<std::pair<double, LabeledSet>> load_test_sets(const std::filesystem::path& dir, const std::vector<double>& scales);

ExperimentRecord eval_sweep(TrainedModel& m, const std::vector<std::pair<double, LabeledSet>>& test_sets);

/// Channel logits of every image, one row per (image, channel):
/// "test_scale,image,label,channel_scale,logit_0,...,logit_{K-1}".
void write_channel_logits_csv(std::ostream& os, ScaleChannelModel<float>& model, const LabeledSet& set, double test_scale,
                              bool header = true);

/// Default sweep sizes: [1/2, 8] at 2^(1/4) for MNIST, [1/2, 2] at 2^(1/4) for CIFAR.
std::vector<double> default_test_scales(const std::string& dataset);

/// Rows "config_hash,test_scale,accuracy,n_test" (header first when asked).
void write_sweep_csv(std::ostream& os, const std::vector<ExperimentRecord>& records, bool header = true);
std::vector<ExperimentRecord> read_sweep_csv(std::istream& is);

// ---------------------------------------------------------------------------
// Benchmark table

struct ScaleRange {
  double lo, hi;
  std::string label() const;  // "0.5-1"
};

/// Benchmark columns: [1/2,1], [1,4], [4,8], [1/2,4], [1/2,8].
std::vector<ScaleRange> default_ranges();

struct BenchmarkTable {
  std::vector<ScaleRange> ranges;
  std::vector<std::string> rows;                    // record names
  std::vector<std::vector<std::optional<double>>> mean;  // [row][range]
  std::vector<std::string> missing;                 // coverage errors

  bool complete() const { return missing.empty(); }
  void write_csv(std::ostream& os) const;
};

/// Mean accuracy of every record over every range, using the sweep sizes
/// lo * spacing^k <= hi. A size absent from a record is listed in `missing`
/// and leaves that cell empty.
BenchmarkTable benchmark_table(const std::vector<ExperimentRecord>& records, const std::vector<ScaleRange>& ranges,
                               double spacing = 1.189207115002721);

// ---------------------------------------------------------------------------
// Scale-selection histograms

struct ScaleHistogram {
  std::vector<double> test_sizes;      // columns
  std::vector<double> channel_scales;  // rows
  RowMatrix<double> counts;            // [channel][size], raw contributions
  RowMatrix<double> normalised;        // each column sums to 1

  void write_csv(std::ostream& os) const;
  /// Greyscale heatmap, largest channel at the top, `cell` pixels per bin.
  void write_pgm(const std::filesystem::path& path, int cell = 8) const;
};

/// Per test image, the contribution of every channel to the winning class:
/// fov_max / sw_max a unit count for the channel holding the max, fov_avg
/// |channel logit| shares, fov_conc |sum_j W[k, s, j] z_s[j]| shares.
ScaleHistogram scale_histogram(TrainedModel& m, const std::vector<std::pair<double, LabeledSet>>& test_sets);

/// Spearman rank correlation between log test size and log channel scale,
/// with the raw histogram counts as weights and mid-ranks for ties.
double histogram_spearman(const ScaleHistogram& h);

// ---------------------------------------------------------------------------
// Property suites

struct PropCheck {
  std::string suite;
  std::string check;
  double value = 0.0;
  double bound = 0.0;
  bool pass = false;

  nlohmann::json to_json() const;
};

std::vector<std::string> propcheck_suites();
/// Runs one suite; throws ConfigError for an unknown name.
std::vector<PropCheck> propcheck(const std::string& suite, std::uint64_t seed = 0);

}  // namespace scn
