#include "tslab/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

namespace tslab {

namespace fs = std::filesystem;

std::string_view split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::holdout: return "holdout";
    case Split::test: return "test";
  }
  return "unknown";
}

Split parse_split(std::string_view name) {
  for (auto s : {Split::train, Split::holdout, Split::test}) {
    if (name == split_name(s)) return s;
  }
  throw std::invalid_argument("unknown split '" + std::string(name) + "'");
}

void DatasetSpec::validate() const {
  std::vector<std::string> problems;
  if (num_classes < 2 || num_classes > 10) problems.push_back("num_classes must be in [2, 10]");
  if (per_class < 1) problems.push_back("per_class must be >= 1");
  if (image_size < 16) problems.push_back("image_size must be >= 16");
  if (channels < 1) problems.push_back("channels must be >= 1");
  if (!(hard_fraction >= 0 && hard_fraction <= 1)) problems.push_back("hard_fraction must be in [0, 1]");
  if (!problems.empty()) {
    std::string msg = "invalid dataset spec:";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw std::invalid_argument(msg);
  }
}

namespace {

constexpr int kPatterns = 5;

// 0/1 pattern value at pixel (x, y) for a given period and phase.
int pattern_bit(int pattern, double x, double y, double period, double phase, double cx, double cy) {
  const double half = period / 2.0;
  auto band = [&](double v) { return static_cast<int>(std::floor((v + phase) / half)) & 1; };
  switch (pattern) {
    case 0: return band(y);
    case 1: return band(x);
    case 2: return band((x + y) / std::sqrt(2.0));
    case 3: return (static_cast<int>(std::floor((x + phase) / half)) +
                    static_cast<int>(std::floor((y + phase) / half))) & 1;
    default: return band(std::hypot(x - cx, y - cy));
  }
}

constexpr int kHues = 5;
const double kHueColors[kHues][3] = {
    {0.85, 0.20, 0.15},  // red
    {0.90, 0.80, 0.15},  // yellow
    {0.20, 0.70, 0.25},  // green
    {0.15, 0.30, 0.85},  // blue
    {0.80, 0.20, 0.75},  // magenta
};

LabeledImage render(int id, int label, bool hard, int size, int channels, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 0.06);
  const int hue = (label / 2) % kHues;
  const bool checked = label % 2 == 1;
  const double scale = size / 32.0;
  Tensor<float> img({static_cast<std::size_t>(channels), static_cast<std::size_t>(size),
                     static_cast<std::size_t>(size)});
  auto px = [&](int c, int y, int x) -> float& {
    return img.data[(static_cast<std::size_t>(c) * size + y) * size + x];
  };

  const double grey = 0.35 + 0.3 * u(rng);
  const int bg_pattern = static_cast<int>(u(rng) * kPatterns) % kPatterns;
  const double bg_period = 4.0 + 4.0 * u(rng);
  const double bg_phase = u(rng) * bg_period;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      double v = grey;
      if (hard) {
        v += 0.15 * (pattern_bit(bg_pattern, x, y, bg_period, bg_phase, size / 2.0, size / 2.0) ? 1 : -1);
      }
      for (int c = 0; c < channels; ++c) px(c, y, x) = static_cast<float>(v);
    }

  const int side = static_cast<int>(std::lround((12 + 10 * u(rng)) * scale));
  const int ox = static_cast<int>(u(rng) * (size - side + 1));
  const int oy = static_cast<int>(u(rng) * (size - side + 1));
  const double period = 8.0 * scale;
  const double phase = u(rng) * period;
  double colors[2][3];
  for (int c = 0; c < 3; ++c) {
    colors[0][c] = kHueColors[hue][c] + 0.1 * (u(rng) - 0.5);
    colors[1][c] = 0.45 * colors[0][c];
  }
  for (int y = oy; y < oy + side; ++y)
    for (int x = ox; x < ox + side; ++x) {
      const int bit = checked ? pattern_bit(3, x, y, period, phase, 0, 0) : 0;
      for (int c = 0; c < channels; ++c) px(c, y, x) = static_cast<float>(colors[bit][c % 3]);
    }

  for (auto& v : img.data) {
    double w = v;
    if (hard) w += noise(rng);
    // Quantise to the 8-bit storage grid so files round-trip exactly.
    v = static_cast<float>(std::lround(std::clamp(w, 0.0, 1.0) * 255.0) / 255.0);
  }
  return {id, label, hard ? 1 : 0, std::move(img)};
}

}  // namespace

std::vector<std::pair<LabeledImage, Split>> synthesize(const DatasetSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<std::pair<LabeledImage, Split>> out;
  int id = 0;
  for (int m = 0; m < spec.num_classes; ++m) {
    std::vector<int> order(static_cast<std::size_t>(spec.per_class));
    for (int i = 0; i < spec.per_class; ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    const int n_train = spec.per_class * 7 / 10;
    const int n_holdout = spec.per_class / 10;
    std::vector<Split> split_of(static_cast<std::size_t>(spec.per_class));
    for (int k = 0; k < spec.per_class; ++k) {
      split_of[order[k]] = k < n_train ? Split::train
                           : k < n_train + n_holdout ? Split::holdout
                                                     : Split::test;
    }
    for (int i = 0; i < spec.per_class; ++i) {
      const bool hard = u(rng) < spec.hard_fraction;
      out.emplace_back(render(id++, m, hard, spec.image_size, spec.channels, rng), split_of[i]);
    }
  }
  return out;
}

// ---- files -----------------------------------------------------------------

namespace {

constexpr char kImageMagic[8] = {'T', 'S', 'I', 'M', 'G', '0', '0', '1'};

void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is, const std::string& path) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error(path + ": truncated image header");
  return b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void save_image(const std::string& path, const Tensor<float>& image) {
  if (image.rank() != 3) throw ShapeError("save_image: expected C x H x W tensor");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
  os.write(kImageMagic, sizeof(kImageMagic));
  put_u32(os, static_cast<std::uint32_t>(image.shape[2]));
  put_u32(os, static_cast<std::uint32_t>(image.shape[1]));
  put_u32(os, static_cast<std::uint32_t>(image.shape[0]));
  std::vector<unsigned char> bytes(image.size());
  for (std::size_t i = 0; i < image.size(); ++i) {
    bytes[i] = static_cast<unsigned char>(std::lround(std::clamp(image.data[i], 0.0f, 1.0f) * 255.0f));
  }
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw std::runtime_error("write failed for '" + path + "'");
}

Tensor<float> load_image(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open image '" + path + "'");
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kImageMagic, sizeof(magic)) != 0) {
    throw std::runtime_error(path + ": not an image container (bad magic)");
  }
  const auto w = get_u32(is, path), h = get_u32(is, path), c = get_u32(is, path);
  if (w == 0 || h == 0 || c == 0 || w > 4096 || h > 4096 || c > 16) {
    throw std::runtime_error(path + ": invalid image geometry");
  }
  std::vector<unsigned char> bytes(static_cast<std::size_t>(w) * h * c);
  is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!is) throw std::runtime_error(path + ": truncated pixel data");
  Tensor<float> img({c, h, w});
  for (std::size_t i = 0; i < bytes.size(); ++i) img.data[i] = bytes[i] / 255.0f;
  return img;
}

DatasetManifest gen_dataset(const DatasetSpec& spec, const std::string& dir) {
  auto items = synthesize(spec);
  fs::create_directories(fs::path(dir) / "images");
  DatasetManifest m;
  m.num_classes = spec.num_classes;
  m.image_size = spec.image_size;
  m.channels = spec.channels;
  m.seed = spec.seed;
  for (const auto& [img, split] : items) {
    char name[32];
    std::snprintf(name, sizeof(name), "images/%05d.tsimg", img.id);
    save_image((fs::path(dir) / name).string(), img.image);
    m.records.push_back({img.id, name, img.label, split, img.difficulty});
  }
  std::ofstream os(fs::path(dir) / "manifest.csv");
  if (!os) throw std::runtime_error("cannot write manifest in '" + dir + "'");
  os << "# num_classes=" << m.num_classes << " image_size=" << m.image_size
     << " channels=" << m.channels << " seed=" << m.seed << "\n";
  os << "id,file,label,split,difficulty\n";
  for (const auto& r : m.records) {
    os << r.id << ',' << r.file << ',' << r.label << ',' << split_name(r.split) << ','
       << r.difficulty << '\n';
  }
  return m;
}

DatasetManifest load_manifest(const std::string& dir) {
  const auto path = (fs::path(dir) / "manifest.csv").string();
  std::ifstream is(path);
  if (!is) throw std::runtime_error("dataset manifest not found: " + path);
  DatasetManifest m;
  std::string line;
  if (!std::getline(is, line) || line.rfind("# ", 0) != 0) {
    throw std::runtime_error(path + ": missing metadata line");
  }
  {
    std::istringstream meta(line.substr(2));
    std::string kv;
    while (meta >> kv) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) continue;
      const auto key = kv.substr(0, eq);
      const auto val = kv.substr(eq + 1);
      if (key == "num_classes") m.num_classes = std::stoi(val);
      else if (key == "image_size") m.image_size = std::stoi(val);
      else if (key == "channels") m.channels = std::stoi(val);
      else if (key == "seed") m.seed = std::stoull(val);
    }
  }
  std::getline(is, line);  // column header
  int lineno = 2;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string f[5];
    for (auto& field : f) {
      if (!std::getline(row, field, ',')) {
        throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected 5 fields");
      }
    }
    ImageRecord r;
    r.id = std::stoi(f[0]);
    r.file = f[1];
    r.label = std::stoi(f[2]);
    r.split = parse_split(f[3]);
    r.difficulty = std::stoi(f[4]);
    if (r.label < 0 || r.label >= m.num_classes) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": label out of range");
    }
    m.records.push_back(std::move(r));
  }
  return m;
}

std::vector<LabeledImage> load_split(const DatasetManifest& manifest, const std::string& dir,
                                     Split split) {
  std::vector<LabeledImage> out;
  for (const auto& r : manifest.records) {
    if (r.split != split) continue;
    out.push_back({r.id, r.label, r.difficulty, load_image((fs::path(dir) / r.file).string())});
  }
  return out;
}

}  // namespace tslab
