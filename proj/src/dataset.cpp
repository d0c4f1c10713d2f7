#include "alseg/dataset.hpp"

#include <cctype>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace alseg {
namespace {

struct RawPnm {
  int width = 0;
  int height = 0;
  int channels = 0;
  int maxval = 0;
  std::vector<unsigned char> bytes;
};

std::string next_token(std::istream& in) {
  std::string tok;
  while (in) {
    const int c = in.peek();
    if (c == '#') {
      std::string skip;
      std::getline(in, skip);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      break;
    }
  }
  in >> tok;
  return tok;
}

RawPnm read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  RawPnm raw;
  const std::string magic = next_token(in);
  if (magic == "P5") {
    raw.channels = 1;
  } else if (magic == "P6") {
    raw.channels = 3;
  } else {
    throw std::runtime_error(path.string() + ": unsupported image format (need binary PGM/PPM)");
  }
  raw.width = std::stoi(next_token(in));
  raw.height = std::stoi(next_token(in));
  raw.maxval = std::stoi(next_token(in));
  if (raw.width < 1 || raw.height < 1 || raw.maxval < 1 || raw.maxval > 255) {
    throw std::runtime_error(path.string() + ": bad header");
  }
  in.get();  // single whitespace before the raster
  raw.bytes.resize(static_cast<std::size_t>(raw.width) * raw.height * raw.channels);
  in.read(reinterpret_cast<char*>(raw.bytes.data()), static_cast<std::streamsize>(raw.bytes.size()));
  if (!in) throw std::runtime_error(path.string() + ": truncated raster");
  return raw;
}

void write_pnm(const std::filesystem::path& path, int width, int height, int channels,
               const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << (channels == 1 ? "P5" : "P6") << '\n' << width << ' ' << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::optional<std::string> optional_field(const std::string& s) {
  if (s == "-") return std::nullopt;
  return s;
}

}  // namespace

ImageF read_image(const std::filesystem::path& path) {
  const RawPnm raw = read_pnm(path);
  const Eigen::Index plane = static_cast<Eigen::Index>(raw.width) * raw.height;
  Eigen::ArrayXf planes(plane * raw.channels);
  for (Eigen::Index p = 0; p < plane; ++p) {
    for (int c = 0; c < raw.channels; ++c) {
      planes(c * plane + p) =
          static_cast<float>(raw.bytes[static_cast<std::size_t>(p * raw.channels + c)]) /
          static_cast<float>(raw.maxval);
    }
  }
  return ImageF(raw.height, raw.width, raw.channels, std::move(planes));
}

void write_image(const std::filesystem::path& path, const ImageF& image) {
  if (image.channels() != 1 && image.channels() != 3) {
    throw std::invalid_argument("write_image: only 1- or 3-channel images are storable");
  }
  const std::size_t plane = static_cast<std::size_t>(image.width()) * image.height();
  std::vector<unsigned char> bytes(plane * static_cast<std::size_t>(image.channels()));
  for (std::size_t p = 0; p < plane; ++p) {
    for (int c = 0; c < image.channels(); ++c) {
      const float v = image.planes()(static_cast<Eigen::Index>(c * plane + p));
      bytes[p * static_cast<std::size_t>(image.channels()) + static_cast<std::size_t>(c)] =
          static_cast<unsigned char>(std::lround(std::clamp(v, 0.0F, 1.0F) * 255.0F));
    }
  }
  write_pnm(path, image.width(), image.height(), image.channels(), bytes);
}

PixelMask read_mask(const std::filesystem::path& path, int num_classes) {
  const RawPnm raw = read_pnm(path);
  if (raw.channels != 1) throw std::runtime_error(path.string() + ": mask must be single-channel");
  std::vector<int> classes(raw.bytes.begin(), raw.bytes.end());
  return PixelMask(raw.height, raw.width, num_classes, std::move(classes));
}

void write_mask(const std::filesystem::path& path, const PixelMask& mask) {
  std::vector<unsigned char> bytes(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) bytes[i] = static_cast<unsigned char>(mask[i]);
  write_pnm(path, mask.width(), mask.height(), 1, bytes);
}

IndexFile parse_index(std::istream& in) {
  IndexFile index;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream meta(line.substr(1));
      std::string kv;
      while (meta >> kv) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) continue;
        const std::string key = kv.substr(0, eq);
        if (key == "num_classes") index.num_classes = std::stoi(kv.substr(eq + 1));
        if (key == "num_image_classes") index.num_image_classes = std::stoi(kv.substr(eq + 1));
      }
      continue;
    }
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (;;) {
      const auto tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (fields.size() != 4) {
      throw std::runtime_error("index line " + std::to_string(line_no) + ": expected 4 tab-separated fields");
    }
    IndexRecord rec;
    rec.id = SampleId(fields[0]);
    rec.image_path = fields[1];
    rec.mask_path = optional_field(fields[2]);
    if (auto label = optional_field(fields[3])) rec.image_label = std::stoi(*label);
    index.records.push_back(std::move(rec));
  }
  return index;
}

void write_index(std::ostream& out, const IndexFile& index) {
  out << "# num_classes=" << index.num_classes << " num_image_classes=" << index.num_image_classes
      << '\n';
  for (const auto& r : index.records) {
    out << r.id.str() << '\t' << r.image_path << '\t' << r.mask_path.value_or("-") << '\t';
    if (r.image_label) {
      out << *r.image_label;
    } else {
      out << '-';
    }
    out << '\n';
  }
}

Dataset Dataset::load(const std::filesystem::path& dir) {
  std::ifstream in(dir / kIndexFileName);
  if (!in) throw std::runtime_error("no " + std::string(kIndexFileName) + " in " + dir.string());
  IndexFile index = parse_index(in);

  int num_classes = index.num_classes;
  std::vector<std::optional<PixelMask>> masks;
  if (num_classes <= 0) {
    // No metadata: infer K from the largest stored class value.
    int max_class = -1;
    for (const auto& r : index.records) {
      if (!r.mask_path) continue;
      const PixelMask m = read_mask(dir / *r.mask_path, kIgnore - 1);
      for (int c : m.classes()) {
        if (c != kIgnore) max_class = std::max(max_class, c);
      }
    }
    num_classes = max_class + 1;
    if (num_classes <= 0) throw std::runtime_error("cannot infer class count for " + dir.string());
  }
  int num_image_classes = index.num_image_classes > 0 ? index.num_image_classes : num_classes;

  std::vector<ImageSample> samples;
  samples.reserve(index.records.size());
  for (const auto& r : index.records) {
    ImageSample s;
    s.id = r.id;
    s.pixels = read_image(dir / r.image_path);
    if (r.mask_path) s.mask = read_mask(dir / *r.mask_path, num_classes);
    if (r.image_label) {
      s.image_label = ImageLabel(*r.image_label, num_image_classes);
    } else if (s.mask) {
      s.image_label = derive_image_label(*s.mask);
    }
    samples.push_back(std::move(s));
  }
  return from_samples(std::move(samples), num_classes, num_image_classes);
}

Dataset Dataset::from_samples(std::vector<ImageSample> samples, int num_classes,
                              int num_image_classes) {
  Dataset d;
  d.num_classes_ = num_classes;
  d.num_image_classes_ = num_image_classes;
  std::sort(samples.begin(), samples.end(),
            [](const ImageSample& a, const ImageSample& b) { return a.id < b.id; });
  d.samples_ = std::move(samples);
  for (std::size_t i = 0; i < d.samples_.size(); ++i) {
    d.samples_[i].validate();
    if (!d.by_id_.emplace(d.samples_[i].id, i).second) {
      throw std::invalid_argument("dataset: duplicate sample id " + d.samples_[i].id.str());
    }
    if (d.samples_[i].mask && d.samples_[i].mask->num_classes() != num_classes) {
      throw std::invalid_argument("dataset: mask class count disagrees for " + d.samples_[i].id.str());
    }
  }
  return d;
}

std::vector<SampleId> Dataset::ids() const {
  std::vector<SampleId> out;
  out.reserve(samples_.size());
  for (const auto& s : samples_) out.push_back(s.id);
  return out;
}

const ImageSample& Dataset::sample(const SampleId& id) const {
  const auto it = by_id_.find(id);
  if (it == by_id_.end()) throw std::out_of_range("unknown sample id " + id.str());
  return samples_[it->second];
}

}  // namespace alseg
