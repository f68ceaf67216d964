#include "scn/harness.hpp"

#include "scn/gradcheck.hpp"
#include "scn/imageops.hpp"
#include "scn/scalespace.hpp"

#include <zlib.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;

namespace scn {

namespace {

constexpr double kQuarterOctave = 1.189207115002721;  // 2^(1/4)

std::string crc_hex(const std::string& text) {
  const uLong crc = crc32(crc32(0L, Z_NULL, 0), reinterpret_cast<const Bytef*>(text.data()), uInt(text.size()));
  char buf[16];
  std::snprintf(buf, sizeof buf, "%08lx", static_cast<unsigned long>(crc));
  return buf;
}

std::string fmt_g(double v, int digits = 6) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

bool is_cifar(const std::string& dataset) { return dataset == "cifar10"; }

json sampling_to_json(const ScaleSampling& s) {
  if (s.mode == ScaleSampling::Mode::fixed) return {{"mode", "fixed"}, {"scale", s.scale}};
  return {{"mode", "log_uniform"}, {"s_min", s.s_min}, {"s_max", s.s_max}};
}

ScaleSampling sampling_from_json(const json& j) {
  const std::string mode = j.value("mode", std::string("fixed"));
  ScaleSampling s;
  if (mode == "fixed") s = ScaleSampling::fixed(j.value("scale", 1.0));
  else if (mode == "log_uniform") s = ScaleSampling::log_uniform(j.at("s_min").get<double>(), j.at("s_max").get<double>(), 0);
  else throw ConfigError("sampling mode must be fixed or log_uniform, got '" + mode + "'");
  s.validate();
  return s;
}

/// Channel geometry for an architecture on a dataset.
ScaleChannelConfig channel_preset(const std::string& arch, const std::string& dataset) {
  ScaleChannelConfig c;
  const bool cifar = is_cifar(dataset);
  c.channel_input = cifar ? 32 : 28;
  c.boundary = cifar ? Boundary::reflect : Boundary::replicate;
  if (arch == "cnn") {
    c.s_min = c.s_max = 1.0;
    c.aggregation = Aggregation::fov_max;
    c.channel_input = cifar ? 32 : 112;
    c.base = build_named_network(cifar ? "cifar_base" : "mnist_cnn");
    return c;
  }
  c.aggregation = parse_aggregation(arch);
  if (cifar) {
    if (c.aggregation == Aggregation::sw_max) throw ConfigError("sw_max is not defined for cifar10");
    c.s_min = 0.5;
    c.s_max = 2.0;
    c.ratio = std::sqrt(2.0);
    c.base = build_named_network("cifar_base");
    return c;
  }
  if (c.aggregation == Aggregation::fov_conc) {
    c.s_min = 1.0;
    c.s_max = 4.0;
    c.ratio = 2.0;
  }
  c.base = build_named_network(c.aggregation == Aggregation::sw_max ? "mnist_base_nobn" : "mnist_base");
  return c;
}

std::vector<const ImageF*> image_ptrs(const LabeledSet& set, std::size_t begin, std::size_t end) {
  std::vector<const ImageF*> out;
  out.reserve(end - begin);
  for (std::size_t i = begin; i < end; ++i) out.push_back(&set.images[i]);
  return out;
}

/// CIFAR pixels [0, 255] -> [-1, 1].
void normalise_cifar(LabeledSet& set) {
  for (auto& img : set.images) {
    img.samples() = img.samples() / 127.5f - 1.0f;
    img.set_value_range({-1.0, 1.0});
  }
}

/// Training / validation images for one epoch.
LabeledSet render_split(const RunConfig& cfg, const LabeledSet& source, Split split, std::uint64_t stream) {
  if (is_cifar(cfg.data.dataset)) {
    LabeledSet out = source;
    normalise_cifar(out);
    return out;
  }
  ScaleSampling s = cfg.sampling;
  s.seed = Rng::derive(cfg.seed, {0x5ca1e, stream}).next();
  return make_mnist_large_scale(source, s, split);
}

fs::path first_existing(const fs::path& dir, const std::vector<std::string>& names) {
  for (const auto& n : names)
    if (fs::exists(dir / n)) return dir / n;
  std::string list;
  for (const auto& n : names) list += (list.empty() ? "" : " or ") + n;
  throw std::runtime_error(list + " not found in " + dir.string());
}

/// Test scene for the scale-space suites: anisotropic Gaussian blobs whose
/// widths grow with `scale`.
Image blob_scene(int size, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  Image img(size, size);
  for (int b = 0; b < 6; ++b) {
    const double cx = rng.uniform(0.3, 0.7) * size, cy = rng.uniform(0.3, 0.7) * size;
    const double sx = rng.uniform(3.0, 6.0) * scale, sy = rng.uniform(3.0, 6.0) * scale;
    const double a = rng.uniform(-1.0, 1.0);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        img(x, y) += a * std::exp(-0.5 * ((x - cx) * (x - cx) / (sx * sx) + (y - cy) * (y - cy) / (sy * sy)));
  }
  return img;
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

json DataConfig::to_json() const {
  return {{"dataset", dataset}, {"source", source}, {"train_count", train_count}, {"validation_count", validation_count}};
}

DataConfig DataConfig::from_json(const json& j) {
  DataConfig d;
  d.dataset = j.value("dataset", d.dataset);
  if (d.dataset != "mnist_large_scale" && d.dataset != "cifar10")
    throw ConfigError("data.dataset must be mnist_large_scale or cifar10, got '" + d.dataset + "'");
  d.source = j.value("source", is_cifar(d.dataset) ? std::string("cifar-10-batches-bin") : std::string("mnist"));
  d.train_count = j.value("train_count", d.train_count);
  d.validation_count = j.value("validation_count", is_cifar(d.dataset) ? std::size_t(0) : d.validation_count);
  return d;
}

void RunConfig::validate() const {
  try {
    channels.validate();
    sampling.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (architecture == "cnn") {
    if (channels.num_channels() != 1) throw ConfigError("cnn runs use a single channel at s = 1");
  } else if (to_string(channels.aggregation) != architecture) {
    throw ConfigError("architecture '" + architecture + "' does not match the channel aggregation");
  }
  if (epochs < 1 && steps < 1) throw ConfigError("need epochs >= 1 or steps >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  if (is_cifar(data.dataset) && channels.base.in_channels != 3) throw ConfigError("cifar10 needs a 3-channel base network");
  if (!is_cifar(data.dataset) && channels.base.in_channels != 1) throw ConfigError("MNIST needs a 1-channel base network");
}

json RunConfig::to_json() const {
  json c = channels.to_json();
  c.erase("aggregation");
  return {{"name", name},
          {"architecture", architecture},
          {"channels", c},
          {"data", data.to_json()},
          {"sampling", sampling_to_json(sampling)},
          {"epochs", epochs},
          {"steps", steps},
          {"batch_size", batch_size},
          {"schedule", schedule.to_json()},
          {"seed", seed},
          {"deterministic", deterministic}};
}

RunConfig RunConfig::from_json(const json& j) {
  try {
    const std::string arch = j.at("architecture").get<std::string>();
    const DataConfig data = DataConfig::from_json(j.value("data", json::object()));
    RunConfig r = preset(arch, data.dataset);
    r.data = data;
    r.name = j.value("name", arch);
    if (j.contains("channels")) {
      json c = j.at("channels");
      json base = r.channels.to_json();
      for (auto it = c.begin(); it != c.end(); ++it) base[it.key()] = it.value();
      base["aggregation"] = arch == "cnn" ? "fov_max" : arch;
      r.channels = ScaleChannelConfig::from_json(base);
    }
    if (j.contains("sampling")) r.sampling = sampling_from_json(j.at("sampling"));
    r.epochs = j.value("epochs", r.epochs);
    r.steps = j.value("steps", r.steps);
    r.batch_size = j.value("batch_size", r.batch_size);
    if (j.contains("schedule")) r.schedule = Schedule::from_json(j.at("schedule"));
    r.seed = j.value("seed", r.seed);
    r.deterministic = j.value("deterministic", r.deterministic);
    r.validate();
    return r;
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("run config: ") + e.what());
  }
}

std::string RunConfig::hash() const { return crc_hex(to_json().dump()); }

RunConfig preset(const std::string& architecture, const std::string& dataset, double train_scale, bool full) {
  if (architecture != "cnn") {
    try {
      parse_aggregation(architecture);
    } catch (const std::invalid_argument&) {
      throw ConfigError("unknown architecture '" + architecture + "'");
    }
  }
  if (dataset != "mnist_large_scale" && !is_cifar(dataset)) throw ConfigError("unknown dataset '" + dataset + "'");
  RunConfig r;
  r.architecture = architecture;
  r.data = DataConfig::from_json({{"dataset", dataset}});
  r.channels = channel_preset(architecture, dataset);
  if (is_cifar(dataset)) {
    r.name = architecture + "_cifar";
    r.sampling = ScaleSampling::fixed(1.0);
    r.batch_size = 256;
    r.schedule = Schedule::cosine(1e-3, 5e-5, 75.0);
    r.steps = full ? 20000 : 5000;
    r.epochs = 0;
  } else {
    r.name = architecture + "_tr" + fmt_g(train_scale);
    r.sampling = ScaleSampling::fixed(train_scale);
    r.batch_size = 128;
    r.epochs = full ? 20 : 10;
    r.schedule = Schedule::exp_decay(architecture == "sw_max" ? 3e-4 : 3e-3, 2.0, 5e-5);
    if (full) r.data.validation_count = 10000;
  }
  r.validate();
  return r;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open run config " + path.string());
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return RunConfig::from_json(j);
}

fs::path data_root(const fs::path& fallback) {
  if (const char* env = std::getenv("SCN_DATA_ROOT"); env && *env) return env;
  return fallback;
}

fs::path resolve_data_path(const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : data_root() / path;
}

LabeledSet load_source_split(const DataConfig& data, Split split) {
  const fs::path dir = resolve_data_path(data.source);
  LabeledSet train_src, test_src;
  if (is_cifar(data.dataset)) {
    std::vector<fs::path> train_files;
    for (int i = 1; i <= 5; ++i) train_files.push_back(first_existing(dir, {"data_batch_" + std::to_string(i) + ".bin"}));
    if (split == Split::test) return load_cifar_batches({first_existing(dir, {"test_batch.bin"})});
    train_src = load_cifar_batches(train_files);
  } else {
    auto idx = [&](const std::string& stem) { return first_existing(dir, {stem + ".gz", stem}); };
    if (split == Split::test) return load_idx(idx("t10k-images-idx3-ubyte"), idx("t10k-labels-idx1-ubyte"));
    train_src = load_idx(idx("train-images-idx3-ubyte"), idx("train-labels-idx1-ubyte"));
  }
  if (data.validation_count >= train_src.size())
    throw ConfigError("validation_count " + std::to_string(data.validation_count) + " leaves no training data");
  LabeledSet out = select_split(train_src, test_src, split, data.validation_count);
  if (split == Split::train && data.train_count > 0) {
    if (data.train_count > out.size())
      throw ConfigError("train_count " + std::to_string(data.train_count) + " exceeds the " +
                        std::to_string(out.size()) + " available training items");
    out = out.subset(0, data.train_count);
  }
  return out;
}

LabeledSet make_test_set(const DataConfig& data, double s, std::size_t count, std::uint64_t seed) {
  LabeledSet src = load_source_split(data, Split::test);
  if (count > 0) {
    if (count > src.size()) throw ConfigError("test count exceeds the " + std::to_string(src.size()) + " source items");
    src = src.subset(0, count);
  }
  if (is_cifar(data.dataset)) {
    LabeledSet out = make_rescaled_cifar_test(src, s);
    normalise_cifar(out);
    return out;
  }
  return make_mnist_large_scale(src, ScaleSampling::fixed(s, seed), Split::test);
}

// ---------------------------------------------------------------------------
// Models

ScaleChannelModel<float> build_model(const RunConfig& cfg) {
  cfg.validate();
  return ScaleChannelModel<float>(cfg.channels, cfg.seed);
}

void save_model(const fs::path& path, const TrainedModel& m, const std::vector<const Adam<float>*>& opts) {
  std::vector<const Network<float>*> nets{&m.model.base()};
  if (m.model.mix().num_layers() > 0) nets.push_back(&m.model.mix());
  CheckpointInfo info = m.info;
  info.meta["run_config"] = m.config.to_json();
  info.meta["config_hash"] = m.config.hash();
  write_checkpoint(path, nets, opts, info);
}

TrainedModel load_model(const fs::path& path) {
  Checkpoint ck = read_checkpoint(path);
  if (!ck.info.meta.contains("run_config")) throw std::runtime_error(path.string() + ": checkpoint carries no run config");
  TrainedModel m;
  m.config = RunConfig::from_json(ck.info.meta.at("run_config"));
  if (ck.nets.empty()) throw std::runtime_error(path.string() + ": checkpoint holds no network");
  Network<float> mix = ck.nets.size() > 1 ? std::move(ck.nets[1]) : Network<float>();
  m.model = ScaleChannelModel<float>(m.config.channels, std::move(ck.nets[0]), std::move(mix));
  m.info = ck.info;
  return m;
}

Tensor<float> predict(ScaleChannelModel<float>& model, const LabeledSet& set, int batch) {
  if (set.size() == 0) throw std::invalid_argument("predict: empty set");
  const int K = model.config().base.num_classes;
  Tensor<float> out({int(set.size()), K});
  for (std::size_t b0 = 0; b0 < set.size(); b0 += std::size_t(batch)) {
    const std::size_t b1 = std::min(set.size(), b0 + std::size_t(batch));
    const Tensor<float> logits = model.forward(make_channel_batch(image_ptrs(set, b0, b1), model.config()), Mode::eval);
    out.data.segment(Eigen::Index(b0) * K, logits.size()) = logits.data;
  }
  return out;
}

double accuracy(ScaleChannelModel<float>& model, const LabeledSet& set, int batch) {
  const auto pred = argmax_rows(predict(model, set, batch));
  std::size_t hit = 0;
  for (std::size_t i = 0; i < set.size(); ++i) hit += pred[i] == set.labels[i];
  return double(hit) / double(set.size());
}

// ---------------------------------------------------------------------------
// Training

json EpochLog::to_json() const {
  json j = {{"epoch", epoch}, {"step", step}, {"loss", loss}, {"lr", lr}, {"seconds", seconds}};
  j["val_accuracy"] = val_accuracy ? json(*val_accuracy) : json(nullptr);
  return j;
}

TrainResult train(const RunConfig& cfg, const fs::path& out_dir, const std::function<void(const EpochLog&)>& progress) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const LabeledSet train_src = load_source_split(cfg.data, Split::train);
  LabeledSet val;
  if (cfg.data.validation_count > 0) val = render_split(cfg, load_source_split(cfg.data, Split::val), Split::val, 1u << 20);

  TrainResult res;
  res.model.config = cfg;
  res.model.model = build_model(cfg);
  ScaleChannelModel<float>& model = res.model.model;
  model.base().seed_dropout(Rng::derive(cfg.seed, {0xd0}).next());
  Adam<float> opt_base, opt_mix;
  opt_base.reset(model.base().params().size());
  opt_mix.reset(model.mix().params().size());
  const bool has_mix = model.mix().num_layers() > 0;

  const bool redraw = cfg.sampling.mode == ScaleSampling::Mode::log_uniform;
  LabeledSet train_set = render_split(cfg, train_src, Split::train, 0);
  const std::size_t n = train_set.size();
  const std::int64_t per_epoch = std::int64_t((n + std::size_t(cfg.batch_size) - 1) / std::size_t(cfg.batch_size));
  const int epochs = cfg.steps > 0 ? int((cfg.steps + per_epoch - 1) / per_epoch) : cfg.epochs;

  if (!out_dir.empty()) fs::create_directories(out_dir);
  std::ofstream log_file;
  if (!out_dir.empty()) log_file.open(out_dir / "train_log.jsonl");

  std::int64_t step = 0;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    if (redraw && epoch > 0) train_set = render_split(cfg, train_src, Split::train, std::uint64_t(epoch));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t(0));
    Rng::derive(cfg.seed, {0x0de7, std::uint64_t(epoch)}).shuffle(order);
    const double lr = lr_at(cfg.schedule, double(epoch));
    double loss_sum = 0.0;
    std::int64_t batches = 0;
    for (std::size_t b0 = 0; b0 < n; b0 += std::size_t(cfg.batch_size)) {
      if (cfg.steps > 0 && step >= cfg.steps) break;
      const std::size_t b1 = std::min(n, b0 + std::size_t(cfg.batch_size));
      std::vector<const ImageF*> imgs;
      std::vector<int> labels;
      for (std::size_t i = b0; i < b1; ++i) {
        imgs.push_back(&train_set.images[order[i]]);
        labels.push_back(train_set.labels[order[i]]);
      }
      model.zero_grads();
      const Tensor<float> logits = model.forward(make_channel_batch(imgs, cfg.channels), Mode::train, true);
      Tensor<float> dlogits;
      loss_sum += softmax_cross_entropy(logits, labels, &dlogits);
      model.backward(dlogits);
      adam_step(opt_base, model.base().params(), model.base().grads(), lr);
      if (has_mix) adam_step(opt_mix, model.mix().params(), model.mix().grads(), lr);
      ++step;
      ++batches;
    }
    EpochLog e;
    e.epoch = epoch + 1;
    e.step = step;
    e.loss = batches ? loss_sum / double(batches) : 0.0;
    e.lr = lr;
    if (!val.images.empty()) e.val_accuracy = accuracy(model, val);
    e.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!std::isfinite(e.loss)) throw std::runtime_error("training diverged (non-finite loss) in epoch " + std::to_string(e.epoch));
    res.log.push_back(e);
    res.model.info.step = step;
    res.model.info.epoch = e.epoch;
    res.model.info.schedule = cfg.schedule;
    res.model.info.meta["val_accuracy"] = e.val_accuracy ? json(*e.val_accuracy) : json(nullptr);
    if (!out_dir.empty()) {
      log_file << e.to_json().dump() << '\n' << std::flush;
      std::vector<const Adam<float>*> opts{&opt_base};
      if (has_mix) opts.push_back(&opt_mix);
      char name[48];
      std::snprintf(name, sizeof name, "checkpoint_epoch%02d.scnk", e.epoch);
      save_model(out_dir / name, res.model, opts);
      fs::copy_file(out_dir / name, out_dir / "checkpoint.scnk", fs::copy_options::overwrite_existing);
      res.checkpoint = out_dir / "checkpoint.scnk";
    }
    if (progress) progress(e);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Evaluation

json ExperimentRecord::to_json() const {
  json r = json::array();
  for (const auto& row : rows) r.push_back({{"test_scale", row.test_scale}, {"accuracy", row.accuracy}, {"n_test", row.n_test}});
  return {{"config_hash", config_hash}, {"name", name},       {"architecture", architecture}, {"training", training},
          {"rows", r},                  {"seconds", seconds}, {"checkpoint", checkpoint}};
}

ExperimentRecord ExperimentRecord::from_json(const json& j) {
  ExperimentRecord e;
  e.config_hash = j.at("config_hash").get<std::string>();
  e.name = j.value("name", e.config_hash);
  e.architecture = j.value("architecture", std::string());
  e.training = j.value("training", std::string());
  e.seconds = j.value("seconds", 0.0);
  e.checkpoint = j.value("checkpoint", std::string());
  for (const auto& r : j.at("rows"))
    e.rows.push_back({r.at("test_scale").get<double>(), r.at("accuracy").get<double>(), r.at("n_test").get<std::size_t>()});
  return e;
}

std::string test_set_name(double s) { return "test_s" + fmt_g(s); }

std::vector<std::pair<double, LabeledSet>> load_test_sets(const fs::path& dir, const std::vector<double>& scales) {
  std::vector<std::pair<double, LabeledSet>> out;
  for (double s : scales) {
    const std::string name = test_set_name(s);
    if (!fs::exists(dir / (name + ".scnt"))) throw std::runtime_error("missing test set " + (dir / (name + ".scnt")).string());
    out.emplace_back(s, read_labeled_set(dir, name));
  }
  return out;
}

ExperimentRecord eval_sweep(TrainedModel& m, const std::vector<std::pair<double, LabeledSet>>& test_sets) {
  const auto t0 = std::chrono::steady_clock::now();
  ExperimentRecord rec;
  rec.config_hash = m.config.hash();
  rec.name = m.config.name;
  rec.architecture = m.config.architecture;
  rec.training = m.config.sampling.describe();
  for (const auto& [s, set] : test_sets) {
    if (set.size() == 0) throw std::runtime_error("empty test set at size " + fmt_g(s));
    rec.rows.push_back({s, accuracy(m.model, set), set.size()});
  }
  rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

void write_channel_logits_csv(std::ostream& os, ScaleChannelModel<float>& model, const LabeledSet& set, double test_scale,
                              bool header) {
  const int S = int(model.num_channels());
  const int K = model.config().base.num_classes;
  if (header) {
    os << "test_scale,image,label,channel_scale";
    for (int k = 0; k < K; ++k) os << ",logit_" << k;
    os << '\n';
  }
  char buf[40];
  for (std::size_t b0 = 0; b0 < set.size(); b0 += 100) {
    const std::size_t b1 = std::min(set.size(), b0 + 100);
    model.forward(make_channel_batch(image_ptrs(set, b0, b1), model.config()), Mode::eval);
    const Tensor<float>& z = model.channel_logits();
    for (int b = 0; b < int(b1 - b0); ++b)
      for (int s = 0; s < S; ++s) {
        os << fmt_g(test_scale, 10) << ',' << b0 + std::size_t(b) << ',' << set.labels[b0 + std::size_t(b)] << ','
           << fmt_g(model.scales()[std::size_t(s)], 10);
        const float* zs = z.sample(b) + s * K;
        for (int k = 0; k < K; ++k) {
          std::snprintf(buf, sizeof buf, ",%.9g", double(zs[k]));
          os << buf;
        }
        os << '\n';
      }
  }
}

std::vector<double> default_test_scales(const std::string& dataset) {
  return is_cifar(dataset) ? geometric_scales(0.5, 2.0, kQuarterOctave) : geometric_scales(0.5, 8.0, kQuarterOctave);
}

void write_sweep_csv(std::ostream& os, const std::vector<ExperimentRecord>& records, bool header) {
  if (header) os << "config_hash,test_scale,accuracy,n_test\n";
  char buf[128];
  for (const auto& r : records)
    for (const auto& row : r.rows) {
      std::snprintf(buf, sizeof buf, "%s,%.17g,%.17g,%zu\n", r.config_hash.c_str(), row.test_scale, row.accuracy, row.n_test);
      os << buf;
    }
}

std::vector<ExperimentRecord> read_sweep_csv(std::istream& is) {
  std::vector<ExperimentRecord> out;
  std::map<std::string, std::size_t> index;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line.rfind("config_hash", 0) == 0) continue;
    std::istringstream ls(line);
    std::string hash, scale, acc, n;
    if (!std::getline(ls, hash, ',') || !std::getline(ls, scale, ',') || !std::getline(ls, acc, ',') || !std::getline(ls, n))
      throw std::runtime_error("bad sweep row: " + line);
    auto [it, fresh] = index.emplace(hash, out.size());
    if (fresh) {
      out.emplace_back();
      out.back().config_hash = out.back().name = hash;
    }
    out[it->second].rows.push_back({std::stod(scale), std::stod(acc), std::size_t(std::stoull(n))});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Benchmark table

std::string ScaleRange::label() const { return fmt_g(lo) + "-" + fmt_g(hi); }

std::vector<ScaleRange> default_ranges() { return {{0.5, 1.0}, {1.0, 4.0}, {4.0, 8.0}, {0.5, 4.0}, {0.5, 8.0}}; }

BenchmarkTable benchmark_table(const std::vector<ExperimentRecord>& records, const std::vector<ScaleRange>& ranges,
                               double spacing) {
  if (!(spacing > 1.0)) throw std::invalid_argument("benchmark_table: spacing must exceed 1");
  BenchmarkTable t;
  t.ranges = ranges;
  for (const auto& rec : records) {
    t.rows.push_back(rec.name);
    auto& cells = t.mean.emplace_back();
    for (const auto& r : ranges) {
      double sum = 0.0;
      int count = 0;
      bool ok = true;
      for (int k = 0;; ++k) {
        const double s = r.lo * std::pow(spacing, k);
        if (s > r.hi * (1.0 + 1e-9)) break;
        const auto hit = std::find_if(rec.rows.begin(), rec.rows.end(),
                                      [&](const SweepRow& row) { return std::abs(row.test_scale - s) <= 1e-6 * s; });
        if (hit == rec.rows.end()) {
          t.missing.push_back(rec.name + ": no test size " + fmt_g(s) + " for range " + r.label());
          ok = false;
          continue;
        }
        sum += hit->accuracy;
        ++count;
      }
      cells.push_back(ok && count > 0 ? std::optional<double>(sum / count) : std::nullopt);
    }
  }
  return t;
}

void BenchmarkTable::write_csv(std::ostream& os) const {
  os << "network";
  for (const auto& r : ranges) os << ',' << r.label();
  os << '\n';
  char buf[32];
  for (std::size_t i = 0; i < rows.size(); ++i) {
    os << rows[i];
    for (const auto& c : mean[i]) {
      if (c) {
        std::snprintf(buf, sizeof buf, ",%.2f", 100.0 * *c);
        os << buf;
      } else {
        os << ",NA";
      }
    }
    os << '\n';
  }
}

// ---------------------------------------------------------------------------
// Scale-selection histograms

ScaleHistogram scale_histogram(TrainedModel& m, const std::vector<std::pair<double, LabeledSet>>& test_sets) {
  auto& model = m.model;
  const Aggregation agg = model.config().aggregation;
  const int S = int(model.num_channels());
  const int K = model.config().base.num_classes;
  ScaleHistogram h;
  h.channel_scales = model.scales();
  h.counts = RowMatrix<double>::Zero(S, Eigen::Index(test_sets.size()));
  for (std::size_t col = 0; col < test_sets.size(); ++col) {
    const auto& [size, set] = test_sets[col];
    h.test_sizes.push_back(size);
    for (std::size_t b0 = 0; b0 < set.size(); b0 += 100) {
      const std::size_t b1 = std::min(set.size(), b0 + 100);
      const Tensor<float> logits = model.forward(make_channel_batch(image_ptrs(set, b0, b1), model.config()), Mode::eval);
      const auto winner = argmax_rows(logits);
      const Tensor<float>& z = model.channel_logits();
      for (int b = 0; b < int(b1 - b0); ++b) {
        const int k = winner[std::size_t(b)];
        if (agg == Aggregation::fov_max || agg == Aggregation::sw_max) {
          h.counts(model.argmax_channel()[std::size_t(b * K + k)], Eigen::Index(col)) += 1.0;
          continue;
        }
        Vec<double> c(S);
        for (int s = 0; s < S; ++s) {
          const float* zs = z.sample(b) + s * K;
          if (agg == Aggregation::fov_avg) {
            c[s] = std::abs(double(zs[k]));
          } else {
            auto W = model.mix().param(0, "weight");
            double acc = 0.0;
            for (int j = 0; j < K; ++j) acc += double(W[Eigen::Index(k) * S * K + s * K + j]) * zs[j];
            c[s] = std::abs(acc);
          }
        }
        const double total = c.sum();
        if (total > 0.0) h.counts.col(Eigen::Index(col)) += c / total;
      }
    }
  }
  h.normalised = h.counts;
  for (Eigen::Index c = 0; c < h.normalised.cols(); ++c) {
    const double sum = h.normalised.col(c).sum();
    if (sum > 0.0) h.normalised.col(c) /= sum;
  }
  return h;
}

void ScaleHistogram::write_csv(std::ostream& os) const {
  os << "channel_scale";
  for (double s : test_sizes) os << ',' << fmt_g(s, 10);
  os << '\n';
  char buf[40];
  for (Eigen::Index r = 0; r < normalised.rows(); ++r) {
    os << fmt_g(channel_scales[std::size_t(r)], 10);
    for (Eigen::Index c = 0; c < normalised.cols(); ++c) {
      std::snprintf(buf, sizeof buf, ",%.10g", normalised(r, c));
      os << buf;
    }
    os << '\n';
  }
}

void ScaleHistogram::write_pgm(const fs::path& path, int cell) const {
  const int rows = int(normalised.rows()), cols = int(normalised.cols());
  const double peak = normalised.size() ? std::max(normalised.maxCoeff(), 1e-300) : 1.0;
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "P5\n" << cols * cell << ' ' << rows * cell << "\n255\n";
  for (int y = 0; y < rows * cell; ++y) {
    const int r = rows - 1 - y / cell;  // largest channel on top
    for (int x = 0; x < cols * cell; ++x)
      os.put(char(static_cast<unsigned char>(std::lround(255.0 * normalised(r, x / cell) / peak))));
  }
}

double histogram_spearman(const ScaleHistogram& h) {
  // Weighted mid-ranks of one coordinate given its marginal weights.
  auto ranks = [](const Vec<double>& marginal) {
    Vec<double> r(marginal.size());
    double before = 0.0;
    for (Eigen::Index i = 0; i < marginal.size(); ++i) {
      r[i] = before + 0.5 * marginal[i];
      before += marginal[i];
    }
    return r;
  };
  // Rows (channel scales) and columns (sizes) are already in increasing order.
  const Vec<double> ry = ranks(h.counts.rowwise().sum());
  const Vec<double> rx = ranks(h.counts.colwise().sum().transpose());
  const double w = h.counts.sum();
  if (!(w > 0.0)) throw std::invalid_argument("histogram_spearman: empty histogram");
  double mx = 0, my = 0;
  for (Eigen::Index r = 0; r < h.counts.rows(); ++r)
    for (Eigen::Index c = 0; c < h.counts.cols(); ++c) {
      mx += h.counts(r, c) * rx[c];
      my += h.counts(r, c) * ry[r];
    }
  mx /= w;
  my /= w;
  double sxy = 0, sxx = 0, syy = 0;
  for (Eigen::Index r = 0; r < h.counts.rows(); ++r)
    for (Eigen::Index c = 0; c < h.counts.cols(); ++c) {
      const double dx = rx[c] - mx, dy = ry[r] - my, v = h.counts(r, c);
      sxy += v * dx * dy;
      sxx += v * dx * dx;
      syy += v * dy * dy;
    }
  if (sxx <= 0.0 || syy <= 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

// ---------------------------------------------------------------------------
// Property suites

json PropCheck::to_json() const {
  return {{"suite", suite}, {"check", check}, {"value", value}, {"bound", bound}, {"pass", pass}};
}

std::vector<std::string> propcheck_suites() {
  return {"gradients", "covariance", "translation", "permutation", "duality", "derivatives", "determinism"};
}

std::vector<PropCheck> propcheck(const std::string& suite, std::uint64_t seed) {
  std::vector<PropCheck> out;
  auto below = [&](std::string check, double value, double bound) {
    out.push_back({suite, std::move(check), value, bound, value <= bound});
  };

  if (suite == "gradients") {
    for (const auto& r : layer_gradient_suite(seed)) below(r.label, r.max_rel_error, 1e-4);
    for (const auto& r : aggregation_gradient_suite(seed)) below(r.label, r.max_rel_error, 1e-4);
  } else if (suite == "covariance") {
    DataConfig d;
    const LabeledSet src = load_source_split(d, Split::test).subset(0, 16);
    ScaleChannelConfig cfg = channel_preset("fov_avg", "mnist_large_scale");
    ScaleChannelModel<float> model(cfg, seed);
    auto render = [&](double t) {
      std::vector<ImageF> v;
      for (const auto& img : src.images) v.push_back(render_large_scale(img.cast<double>(), t).cast<float>());
      return v;
    };
    auto ptrs = [](const std::vector<ImageF>& v) {
      std::vector<const ImageF*> p;
      for (const auto& x : v) p.push_back(&x);
      return p;
    };
    const auto base = render(1.0);
    for (int k : {1, 4}) {
      const double t = std::pow(kQuarterOctave, k);
      const auto scaled = render(t);
      const auto st = covariance_residual(model, ptrs(base), ptrs(scaled), t);
      below("fov_avg untrained size 1 vs " + fmt_g(t), st.mean_abs, 0.05);
    }
  } else if (suite == "translation") {
    NetworkSpec spec;
    spec.name = "shift_probe";
    spec.in_channels = 1;
    spec.in_height = spec.in_width = 28;
    spec.layers = {LayerSpec::conv(16, 1, 0), LayerSpec::relu(), LayerSpec::conv(16, 1, 0), LayerSpec::relu(),
                   LayerSpec::fc(10)};
    Network<float> net = init_weights<float>(spec, seed);
    Rng rng(seed + 7);
    Tensor<float> big({1, 1, 29, 28});
    for (auto& v : big.data) v = float(rng.uniform(-1.0, 1.0));
    Tensor<float> top({1, 1, 28, 28}), bottom({1, 1, 28, 28});
    top.data = big.data.head(28 * 28);
    bottom.data = big.data.tail(28 * 28);
    const Tensor<float> ft = net.forward(top, Mode::eval, nullptr, 0, 4);
    const Tensor<float> fb = net.forward(bottom, Mode::eval, nullptr, 0, 4);
    const int h = ft.dim(2), w = ft.dim(3);
    double worst = 0.0;
    for (int c = 0; c < ft.dim(1); ++c)
      for (int y = 0; y + 1 < h; ++y)
        for (int x = 0; x < w; ++x)
          worst = std::max(worst, double(std::abs(fb.data[(c * h + y) * w + x] - ft.data[(c * h + y + 1) * w + x])));
    below("conv trunk one-pixel shift, max abs difference", worst, 0.0);
  } else if (suite == "permutation") {
    Rng rng(seed + 3);
    std::vector<ImageF> imgs;
    for (int i = 0; i < 4; ++i) {
      ImageF img(112, 112);
      for (auto& v : img.samples()) v = float(rng.uniform(-1.0, 1.0));
      imgs.push_back(gaussian_smooth(img, 2.0));
    }
    std::vector<const ImageF*> p;
    for (const auto& x : imgs) p.push_back(&x);
    for (const char* a : {"fov_max", "fov_avg"}) {
      const ScaleChannelConfig cfg = channel_preset(a, "mnist_large_scale");
      ScaleChannelModel<float> model(cfg, seed);
      const auto batch = make_channel_batch(p, cfg);
      const Tensor<float> ref = model.forward(batch, Mode::eval);
      auto perm = batch;
      const int S = int(cfg.num_channels());
      const auto per = batch.folded.stride0();
      for (int b = 0; b < 4; ++b)
        for (int s = 0; s < S; ++s)
          perm.folded.data.segment((b * S + s) * per, per) = batch.folded.data.segment((b * S + S - 1 - s) * per, per);
      const Tensor<float> out = model.forward(perm, Mode::eval);
      below(std::string(a) + " reversed channel order, max abs difference", double((out.data - ref.data).cwiseAbs().maxCoeff()), 0.0);
    }
  } else if (suite == "duality") {
    const Image img = blob_scene(96, seed + 17);
    for (double s : {2.0, 4.0})
      for (auto f : {GaussianDerivativeFilter{0, 0, 2.0}, GaussianDerivativeFilter{1, 0, 2.0}, GaussianDerivativeFilter{0, 2, 2.0}})
        below("filter d(" + std::to_string(f.dx) + "," + std::to_string(f.dy) + ") s=" + fmt_g(s),
              duality_residual(img, f, s).normalised_mean(), 0.02);
    for (double s : {2.0, 4.0}) {
      const double r1 = duality_residual(blob_scene(64, seed + 23, 0.5), GaussianDerivativeFilter{1, 0, 1.0}, s).normalised_mean();
      const double r2 = duality_residual(blob_scene(128, seed + 23, 1.0), GaussianDerivativeFilter{1, 0, 2.0}, s).normalised_mean();
      below("doubled resolution residual ratio s=" + fmt_g(s), r2 / r1, 0.6);
    }
  } else if (suite == "derivatives") {
    const Image img = blob_scene(128, seed + 31);
    for (double s : {2.0, 4.0})
      for (DerivativeOrder ord : {DerivativeOrder{1, 0}, DerivativeOrder{0, 1}, DerivativeOrder{2, 0}, DerivativeOrder{1, 1}})
        below("L(" + std::to_string(ord.dx) + "," + std::to_string(ord.dy) + ") s=" + fmt_g(s),
              normalised_derivative_equivalence(img, ord, 1.5, s).normalised_mean(), 0.02);
  } else if (suite == "determinism") {
    DataConfig d;
    const LabeledSet src = load_source_split(d, Split::test).subset(0, 50);
    const auto sampling = ScaleSampling::log_uniform(0.5, 8.0, seed);
    const LabeledSet a = make_mnist_large_scale(src, sampling, Split::test);
    const LabeledSet b = make_mnist_large_scale(src, sampling, Split::test);
    double diff = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) diff = std::max(diff, double((a.images[i].samples() - b.images[i].samples()).abs().maxCoeff()));
    below("regenerated split, max abs difference", diff, 0.0);
    ScaleChannelModel<float> model(channel_preset("fov_avg", "mnist_large_scale"), seed);
    const Tensor<float> l1 = predict(model, a), l2 = predict(model, a);
    below("repeated eval logits, max abs difference", double((l1.data - l2.data).cwiseAbs().maxCoeff()), 0.0);
  } else {
    throw ConfigError("unknown propcheck suite '" + suite + "'");
  }
  return out;
}

}  // namespace scn
