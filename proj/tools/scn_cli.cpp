// scn: dataset generation, training, evaluation sweeps, benchmark tables,
// scale-selection histograms and property checks.
//
// Exit codes: 0 ok, 1 failure, 2 bad configuration or usage.

#include "scn/harness.hpp"

#include <CLI11.hpp>

#include <malloc.h>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

namespace fs = std::filesystem;
using namespace scn;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

std::vector<double> scales_or_default(const std::vector<double>& given, const std::string& dataset) {
  return given.empty() ? default_test_scales(dataset) : given;
}

}  // namespace

int main(int argc, char** argv) {
  // Activations are large and short-lived; keep freed memory in the heap
  // instead of returning it to the kernel after every layer.
  mallopt(M_MMAP_MAX, 0);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);

  CLI::App app{"scale-channel networks: datasets, training and evaluation"};
  app.require_subcommand(1);

  // generate-dataset
  auto* gen = app.add_subcommand("generate-dataset", "render MNIST Large Scale / rescaled CIFAR-10 splits");
  std::string gen_source = "mnist", gen_source_dir, gen_split = "test", gen_out;
  std::optional<double> gen_scale;
  std::vector<double> gen_range, gen_scales;
  std::size_t gen_count = 0, gen_val = 500;
  std::uint64_t gen_seed = 0;
  gen->add_option("--source", gen_source, "mnist or cifar10")->check(CLI::IsMember({"mnist", "cifar10"}));
  gen->add_option("--source-dir", gen_source_dir, "IDX / CIFAR batch directory (default: $SCN_DATA_ROOT/mnist or cifar-10-batches-bin)");
  gen->add_option("--split", gen_split, "train, val or test");
  auto* o_scale = gen->add_option("--scale", gen_scale, "fixed object size (MNIST) / rescaling factor (CIFAR)");
  auto* o_range = gen->add_option("--scale-range", gen_range, "a,b: sizes log-uniform in [a, b] (train/val)")
                      ->delimiter(',')->expected(2);
  auto* o_scales = gen->add_option("--scales", gen_scales, "test sizes, one set each (default: the full sweep)")->delimiter(',');
  o_scale->excludes(o_range)->excludes(o_scales);
  o_range->excludes(o_scales);
  gen->add_option("--count", gen_count, "first N source items (0 = all)");
  gen->add_option("--validation-count", gen_val, "items held out of the training source");
  gen->add_option("--seed", gen_seed);
  gen->add_option("--out", gen_out, "output directory")->required();

  // train
  auto* tr = app.add_subcommand("train", "train a network; checkpoint every epoch");
  std::string tr_config, tr_preset, tr_dataset = "mnist_large_scale", tr_out;
  double tr_scale = 2.0;
  bool tr_full = false;
  int tr_epochs = 0;
  std::size_t tr_count = 0;
  std::int64_t tr_seed = -1;
  tr->add_option("--config", tr_config, "run config JSON");
  tr->add_option("--preset", tr_preset, "cnn, fov_max, fov_avg, fov_conc or sw_max");
  tr->add_option("--dataset", tr_dataset, "preset dataset");
  tr->add_option("--train-scale", tr_scale, "preset training size");
  tr->add_flag("--full", tr_full, "published budget instead of desk scale");
  tr->add_option("--epochs", tr_epochs, "override epochs");
  tr->add_option("--train-count", tr_count, "override training items");
  tr->add_option("--seed", tr_seed, "override seed");
  tr->add_option("--out", tr_out, "output directory")->required();

  // eval
  auto* ev = app.add_subcommand("eval", "accuracy sweep over test sizes");
  std::string ev_ckpt, ev_dir, ev_csv, ev_record, ev_logits;
  std::vector<double> ev_scales;
  ev->add_option("--checkpoint", ev_ckpt)->required();
  ev->add_option("--test-dir", ev_dir, "directory of test_s*.scnt sets")->required();
  ev->add_option("--scales", ev_scales, "test sizes (default: the dataset's sweep)")->delimiter(',');
  ev->add_option("--csv", ev_csv, "append rows config_hash,test_scale,accuracy,n_test");
  ev->add_option("--record", ev_record, "write the experiment record as JSON");
  ev->add_option("--channel-logits", ev_logits, "dump per-channel logits of every test image as CSV");

  // benchmark
  auto* bm = app.add_subcommand("benchmark", "range means over sweep records");
  std::vector<std::string> bm_records;
  std::string bm_out;
  double bm_spacing = 1.189207115002721;
  bm->add_option("records", bm_records, "experiment record JSON files or sweep CSV files")->required();
  bm->add_option("--spacing", bm_spacing, "size spacing inside each range");
  bm->add_option("--out", bm_out, "CSV output (default stdout)");

  // histogram
  auto* hi = app.add_subcommand("histogram", "scale-selection histogram");
  std::string hi_ckpt, hi_dir, hi_csv, hi_pgm;
  std::vector<double> hi_scales;
  hi->add_option("--checkpoint", hi_ckpt)->required();
  hi->add_option("--test-dir", hi_dir)->required();
  hi->add_option("--scales", hi_scales)->delimiter(',');
  hi->add_option("--csv", hi_csv);
  hi->add_option("--pgm", hi_pgm);

  // propcheck
  auto* pc = app.add_subcommand("propcheck", "property suites; no suite lists them");
  std::vector<std::string> pc_suites;
  std::uint64_t pc_seed = 0;
  pc->add_option("suites", pc_suites);
  pc->add_option("--seed", pc_seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen) {
      const std::string dataset = gen_source == "cifar10" ? "cifar10" : "mnist_large_scale";
      DataConfig data = DataConfig::from_json({{"dataset", dataset}});
      if (!gen_source_dir.empty()) data.source = gen_source_dir;
      data.validation_count = gen_val;
      const Split split = parse_split(gen_split);
      if (split == Split::test) {
        if (!gen_range.empty()) throw ConfigError("--scale-range applies to train/val; test sets use --scale or --scales");
        const auto scales = gen_scale ? std::vector<double>{*gen_scale} : scales_or_default(gen_scales, dataset);
        for (double s : scales) {
          LabeledSet set = make_test_set(data, s, gen_count, gen_seed);
          write_labeled_set(gen_out, test_set_name(s), set);
          std::printf("%s/%s.scnt  n=%zu  size=%g\n", gen_out.c_str(), test_set_name(s).c_str(), set.size(), s);
        }
      } else {
        if (dataset != "mnist_large_scale") throw ConfigError("train/val generation is MNIST Large Scale only");
        if (!gen_scales.empty()) throw ConfigError("--scales applies to test sets");
        LabeledSet src = load_source_split(data, split);
        if (gen_count > 0) {
          if (gen_count > src.size()) throw ConfigError("--count exceeds the source split");
          src = src.subset(0, gen_count);
        }
        ScaleSampling sampling = gen_range.empty() ? ScaleSampling::fixed(gen_scale.value_or(1.0))
                                                   : ScaleSampling::log_uniform(gen_range[0], gen_range[1], 0);
        sampling.seed = gen_seed;
        try {
          sampling.validate();
        } catch (const std::invalid_argument& e) {
          throw ConfigError(e.what());
        }
        const LabeledSet set = make_mnist_large_scale(src, sampling, split);
        write_labeled_set(gen_out, to_string(split), set);
        std::printf("%s/%s.scnt  n=%zu  %s\n", gen_out.c_str(), to_string(split), set.size(), sampling.describe().c_str());
      }
      return 0;
    }

    if (*tr) {
      if (tr_config.empty() == tr_preset.empty()) throw ConfigError("give exactly one of --config and --preset");
      RunConfig cfg = tr_config.empty() ? preset(tr_preset, tr_dataset, tr_scale, tr_full) : load_run_config(tr_config);
      if (tr_epochs > 0) {
        cfg.epochs = tr_epochs;
        cfg.steps = 0;
      }
      if (tr_count > 0) cfg.data.train_count = tr_count;
      if (tr_seed >= 0) cfg.seed = std::uint64_t(tr_seed);
      cfg.validate();
      fs::create_directories(tr_out);
      write_text(fs::path(tr_out) / "config.json", cfg.to_json().dump(2) + "\n");
      std::printf("run %s (%s), config %s\n", cfg.name.c_str(), cfg.architecture.c_str(), cfg.hash().c_str());
      const auto res = train(cfg, tr_out, [](const EpochLog& e) {
        std::printf("epoch %2d  step %6lld  loss %.4f  lr %.2e", e.epoch, static_cast<long long>(e.step), e.loss, e.lr);
        if (e.val_accuracy) std::printf("  val %.4f", *e.val_accuracy);
        std::printf("  %.0fs\n", e.seconds);
        std::fflush(stdout);
      });
      std::printf("checkpoint %s\n", res.checkpoint.c_str());
      return 0;
    }

    if (*ev) {
      TrainedModel m = load_model(ev_ckpt);
      const auto sets = load_test_sets(ev_dir, scales_or_default(ev_scales, m.config.data.dataset));
      ExperimentRecord rec = eval_sweep(m, sets);
      rec.checkpoint = ev_ckpt;
      std::ostringstream csv;
      write_sweep_csv(csv, {rec}, ev_csv.empty() || !fs::exists(ev_csv));
      std::cout << csv.str();
      if (!ev_csv.empty()) {
        std::ofstream os(ev_csv, std::ios::app);
        if (!os) throw std::runtime_error("cannot write " + ev_csv);
        os << csv.str();
      }
      if (!ev_record.empty()) write_text(ev_record, rec.to_json().dump(2) + "\n");
      if (!ev_logits.empty()) {
        std::ostringstream os;
        for (std::size_t i = 0; i < sets.size(); ++i) write_channel_logits_csv(os, m.model, sets[i].second, sets[i].first, i == 0);
        write_text(ev_logits, os.str());
      }
      return 0;
    }

    if (*bm) {
      std::vector<ExperimentRecord> records;
      for (const auto& path : bm_records) {
        std::ifstream is(path);
        if (!is) throw std::runtime_error("cannot open " + path);
        if (fs::path(path).extension() == ".csv") {
          for (auto& r : read_sweep_csv(is)) records.push_back(std::move(r));
        } else {
          records.push_back(ExperimentRecord::from_json(nlohmann::json::parse(is)));
        }
      }
      const BenchmarkTable table = benchmark_table(records, default_ranges(), bm_spacing);
      std::ostringstream os;
      table.write_csv(os);
      if (bm_out.empty()) std::cout << os.str();
      else write_text(bm_out, os.str());
      for (const auto& m : table.missing) std::fprintf(stderr, "incomplete coverage: %s\n", m.c_str());
      return table.complete() ? 0 : 1;
    }

    if (*hi) {
      TrainedModel m = load_model(hi_ckpt);
      const auto sets = load_test_sets(hi_dir, scales_or_default(hi_scales, m.config.data.dataset));
      const ScaleHistogram h = scale_histogram(m, sets);
      std::ostringstream os;
      h.write_csv(os);
      if (hi_csv.empty()) std::cout << os.str();
      else write_text(hi_csv, os.str());
      if (!hi_pgm.empty()) h.write_pgm(hi_pgm);
      std::printf("spearman %.4f\n", histogram_spearman(h));
      return 0;
    }

    if (*pc) {
      if (pc_suites.empty()) {
        for (const auto& s : propcheck_suites()) std::printf("%s\n", s.c_str());
        return 0;
      }
      bool ok = true;
      for (const auto& suite : pc_suites)
        for (const auto& r : propcheck(suite, pc_seed)) {
          std::printf("%s\n", r.to_json().dump().c_str());
          ok = ok && r.pass;
        }
      return ok ? 0 : 1;
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const nlohmann::json::exception& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
