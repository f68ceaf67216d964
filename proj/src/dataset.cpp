#include "scn/dataset.hpp"

#include "scn/imageops.hpp"

#include <json.hpp>
#include <zlib.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>
#include <stdexcept>

namespace scn {

namespace fs = std::filesystem;

const char* to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  if (name == "test") return Split::test;
  throw std::invalid_argument("unknown split '" + name + "'");
}

void LabeledSet::validate() const {
  if (images.size() != labels.size()) throw std::invalid_argument("LabeledSet: image/label count mismatch");
  if (!scales.empty() && scales.size() != images.size()) throw std::invalid_argument("LabeledSet: scale count mismatch");
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (!images[i].same_geometry(images.front())) throw std::invalid_argument("LabeledSet: non-uniform image size");
    if (labels[i] < 0 || labels[i] >= num_classes) throw std::invalid_argument("LabeledSet: label out of range");
  }
}

LabeledSet LabeledSet::subset(std::size_t begin, std::size_t end) const {
  if (begin > end || end > size()) throw std::out_of_range("LabeledSet::subset: bad range");
  LabeledSet out;
  out.num_classes = num_classes;
  out.meta = meta;
  out.images.assign(images.begin() + long(begin), images.begin() + long(end));
  out.labels.assign(labels.begin() + long(begin), labels.begin() + long(end));
  if (!scales.empty()) out.scales.assign(scales.begin() + long(begin), scales.begin() + long(end));
  return out;
}

void ScaleSampling::validate() const {
  if (mode == Mode::fixed) {
    if (!(scale > 0.0)) throw std::invalid_argument("ScaleSampling: scale must be positive");
  } else if (!(s_min > 0.0) || !(s_max > s_min)) {
    throw std::invalid_argument("ScaleSampling: need 0 < s_min < s_max");
  }
}

std::string ScaleSampling::describe() const {
  std::ostringstream os;
  if (mode == Mode::fixed) os << "fixed(" << scale << ")";
  else os << "log_uniform(" << s_min << "," << s_max << ")";
  return os.str();
}

std::vector<double> sample_scales(const ScaleSampling& sampling, std::size_t n, Rng& rng) {
  sampling.validate();
  if (n < 1) throw std::invalid_argument("sample_scales: n must be >= 1");
  std::vector<double> out(n, sampling.scale);
  if (sampling.mode == ScaleSampling::Mode::log_uniform) {
    const double a = std::log(sampling.s_min), b = std::log(sampling.s_max);
    for (auto& s : out) s = std::exp(rng.uniform(a, b));
  }
  return out;
}

std::vector<double> sample_scales(const ScaleSampling& sampling, std::size_t n) {
  Rng rng(sampling.seed);
  return sample_scales(sampling, n, rng);
}

// ---------------------------------------------------------------------------

namespace {

struct GzCloser {
  void operator()(gzFile f) const { if (f) gzclose(f); }
};
using GzHandle = std::unique_ptr<gzFile_s, GzCloser>;

GzHandle open_gz(const fs::path& path) {
  GzHandle f(gzopen(path.c_str(), "rb"));
  if (!f) throw std::runtime_error("cannot open " + path.string());
  return f;
}

void read_exact(gzFile f, void* dst, std::size_t n, const fs::path& path) {
  auto* p = static_cast<unsigned char*>(dst);
  while (n > 0) {
    const unsigned chunk = unsigned(std::min<std::size_t>(n, 1u << 30));
    const int got = gzread(f, p, chunk);
    if (got <= 0) throw std::runtime_error("truncated file " + path.string());
    p += got;
    n -= std::size_t(got);
  }
}

std::uint32_t read_be32(gzFile f, const fs::path& path) {
  unsigned char b[4];
  read_exact(f, b, 4, path);
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) | b[3];
}

}  // namespace

LabeledSet load_idx(const fs::path& images_path, const fs::path& labels_path) {
  auto fi = open_gz(images_path);
  auto fl = open_gz(labels_path);
  if (read_be32(fi.get(), images_path) != 0x00000803u) throw std::runtime_error("bad IDX image magic in " + images_path.string());
  if (read_be32(fl.get(), labels_path) != 0x00000801u) throw std::runtime_error("bad IDX label magic in " + labels_path.string());
  const std::uint32_t n = read_be32(fi.get(), images_path);
  const int rows = int(read_be32(fi.get(), images_path));
  const int cols = int(read_be32(fi.get(), images_path));
  const std::uint32_t nl = read_be32(fl.get(), labels_path);
  if (n != nl) throw std::runtime_error("IDX image/label count mismatch");

  LabeledSet set;
  set.meta.source = "mnist";
  std::vector<unsigned char> pixels(std::size_t(n) * rows * cols);
  std::vector<unsigned char> labels(n);
  read_exact(fi.get(), pixels.data(), pixels.size(), images_path);
  read_exact(fl.get(), labels.data(), labels.size(), labels_path);
  set.images.reserve(n);
  const std::size_t stride = std::size_t(rows) * cols;
  for (std::uint32_t i = 0; i < n; ++i) {
    ImageF img(cols, rows, 1, 0.0f, {0.0, 255.0});
    for (std::size_t p = 0; p < stride; ++p) img.samples()[Eigen::Index(p)] = pixels[i * stride + p];
    set.images.push_back(std::move(img));
    set.labels.push_back(labels[i]);
  }
  set.validate();
  set.meta.source_crc = crc32_of(set);
  return set;
}

LabeledSet load_cifar_batches(const std::vector<fs::path>& batch_files) {
  constexpr std::size_t kRecord = 3073, kPlane = 1024;
  LabeledSet set;
  set.meta.source = "cifar10";
  std::vector<unsigned char> rec(kRecord);
  for (const auto& path : batch_files) {
    std::ifstream is(path, std::ios::binary | std::ios::ate);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    const auto bytes = std::size_t(is.tellg());
    if (bytes == 0 || bytes % kRecord != 0) throw std::runtime_error("truncated CIFAR batch " + path.string());
    is.seekg(0);
    for (std::size_t r = 0; r < bytes / kRecord; ++r) {
      is.read(reinterpret_cast<char*>(rec.data()), kRecord);
      ImageF img(32, 32, 3, 0.0f, {0.0, 255.0});
      for (std::size_t p = 0; p < 3 * kPlane; ++p) img.samples()[Eigen::Index(p)] = rec[1 + p];
      if (rec[0] > 9) throw std::runtime_error("CIFAR label out of range in " + path.string());
      set.images.push_back(std::move(img));
      set.labels.push_back(rec[0]);
    }
  }
  set.validate();
  set.meta.source_crc = crc32_of(set);
  return set;
}

std::uint32_t crc32_of(const LabeledSet& set) {
  uLong crc = crc32(0L, Z_NULL, 0);
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto& s = set.images[i].samples();
    crc = crc32(crc, reinterpret_cast<const Bytef*>(s.data()), uInt(s.size() * sizeof(float)));
    const std::int32_t lab = set.labels[i];
    crc = crc32(crc, reinterpret_cast<const Bytef*>(&lab), sizeof lab);
  }
  return std::uint32_t(crc);
}

// ---------------------------------------------------------------------------

Image render_large_scale(const Image& digit, double s, const LargeScaleParams& params) {
  if (!(s > 0.0) || !std::isfinite(s)) throw std::invalid_argument("render_large_scale: invalid scale");
  if (digit.width() != 28 || digit.height() != 28 || digit.channels() != 1) {
    throw std::invalid_argument("render_large_scale: source must be a 28x28 single-channel digit");
  }
  // Even-sized resample grid covering the whole magnified digit, so centring
  // into the (even) canvas is exact.
  const int n = 2 * int(std::ceil(14.0 * s));
  Image img = resample(digit, ResampleSpec::about_center(s, n, n, Interpolation::bicubic, Boundary::zero));
  img = clip(img, 0.0, 256.0);
  img = pad_or_crop(img, params.canvas, params.canvas, Boundary::zero);
  img = gaussian_smooth(img, params.sigma_per_scale * s);
  img = clip_and_rescale(img, 0.0, 256.0, 0.0, 255.0);
  return arctan_squash(img, params.gain, params.offset);
}

LabeledSet select_split(const LabeledSet& train_source, const LabeledSet& test_source, Split split,
                        std::size_t validation_count) {
  if (split == Split::test) return test_source;
  if (validation_count >= train_source.size()) throw std::invalid_argument("select_split: validation set swallows the training source");
  const std::size_t cut = train_source.size() - validation_count;
  return split == Split::train ? train_source.subset(0, cut) : train_source.subset(cut, train_source.size());
}

LabeledSet make_mnist_large_scale(const LabeledSet& source, const ScaleSampling& sampling, Split split,
                                  const LargeScaleParams& params) {
  sampling.validate();
  if (source.size() == 0) throw std::invalid_argument("make_mnist_large_scale: empty source");
  Rng rng = Rng::derive(sampling.seed, {std::uint64_t(split)});
  LabeledSet out;
  out.num_classes = source.num_classes;
  out.labels = source.labels;
  out.scales = sample_scales(sampling, source.size(), rng);
  out.meta = {"mnist_large_scale", to_string(split), sampling.describe(), sampling.seed, crc32_of(source)};
  out.images.reserve(source.size());
  for (std::size_t i = 0; i < source.size(); ++i) {
    out.images.push_back(render_large_scale(source.images[i].cast<double>(), out.scales[i], params).cast<float>());
  }
  return out;
}

LabeledSet make_rescaled_cifar_test(const LabeledSet& source, double s) {
  if (!(s >= 0.5 && s <= 2.0)) throw std::invalid_argument("make_rescaled_cifar_test: s must lie in [0.5, 2]");
  LabeledSet out;
  out.num_classes = source.num_classes;
  out.labels = source.labels;
  out.scales.assign(source.size(), s);
  std::ostringstream desc;
  desc << "fixed(" << s << ")";
  out.meta = {"cifar10_rescaled", "test", desc.str(), 0, crc32_of(source)};
  out.images.reserve(source.size());
  for (const auto& img : source.images) {
    if (img.width() != 32 || img.height() != 32) throw std::invalid_argument("make_rescaled_cifar_test: expected 32x32 images");
    out.images.push_back(resample(img, ResampleSpec::about_center(s, 32, 32, Interpolation::bilinear, Boundary::reflect)));
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const fs::path& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw std::runtime_error("truncated file " + path.string());
  return v;
}

}  // namespace

void write_labeled_set(const fs::path& dir, const std::string& name, const LabeledSet& set) {
  set.validate();
  fs::create_directories(dir);
  const fs::path data_path = dir / (name + ".scnt");
  {
    std::ofstream os(data_path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + data_path.string());
    os.write("SCNT", 4);
    put<std::uint32_t>(os, 1);
    const ImageF probe = set.size() ? set.images.front() : ImageF();
    put<std::uint32_t>(os, std::uint32_t(set.size()));
    put<std::uint32_t>(os, std::uint32_t(probe.channels()));
    put<std::uint32_t>(os, std::uint32_t(probe.height()));
    put<std::uint32_t>(os, std::uint32_t(probe.width()));
    for (const auto& img : set.images) {
      os.write(reinterpret_cast<const char*>(img.samples().data()), std::streamsize(img.size() * sizeof(float)));
    }
    for (int l : set.labels) put<std::int32_t>(os, l);
    for (std::size_t i = 0; i < set.size(); ++i) put<double>(os, set.scales.empty() ? 1.0 : set.scales[i]);
    if (!os) throw std::runtime_error("write failed for " + data_path.string());
  }
  nlohmann::json manifest = {
      {"source", set.meta.source},
      {"split", set.meta.split},
      {"sampling", set.meta.sampling},
      {"seed", set.meta.seed},
      {"source_crc32", set.meta.source_crc},
      {"pipeline_version", kPipelineVersion},
      {"count", set.size()},
      {"num_classes", set.num_classes},
      {"crc32", crc32_of(set)},
  };
  std::ofstream(dir / (name + ".json")) << manifest.dump(2) << "\n";
}

LabeledSet read_labeled_set(const fs::path& dir, const std::string& name) {
  const fs::path data_path = dir / (name + ".scnt");
  std::ifstream is(data_path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + data_path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "SCNT", 4) != 0) throw std::runtime_error("bad magic in " + data_path.string());
  if (get<std::uint32_t>(is, data_path) != 1) throw std::runtime_error("unsupported container version in " + data_path.string());
  const auto n = get<std::uint32_t>(is, data_path);
  const int c = int(get<std::uint32_t>(is, data_path));
  const int h = int(get<std::uint32_t>(is, data_path));
  const int w = int(get<std::uint32_t>(is, data_path));

  LabeledSet set;
  std::ifstream ms(dir / (name + ".json"));
  if (ms) {
    const auto m = nlohmann::json::parse(ms);
    set.meta = {m.value("source", ""), m.value("split", ""), m.value("sampling", ""), m.value("seed", std::uint64_t(0)),
                m.value("source_crc32", std::uint32_t(0))};
    set.num_classes = m.value("num_classes", 10);
  }
  set.images.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    ImageF img(w, h, c, 0.0f, {-1.0, 1.0});
    if (!is.read(reinterpret_cast<char*>(img.samples().data()), std::streamsize(img.size() * sizeof(float)))) {
      throw std::runtime_error("truncated file " + data_path.string());
    }
    set.images.push_back(std::move(img));
  }
  for (std::uint32_t i = 0; i < n; ++i) set.labels.push_back(get<std::int32_t>(is, data_path));
  for (std::uint32_t i = 0; i < n; ++i) set.scales.push_back(get<double>(is, data_path));
  set.validate();
  return set;
}

}  // namespace scn
