#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "hemaseg/data.hpp"
#include "hemaseg/image.hpp"
#include "hemaseg/rng.hpp"

namespace hemaseg {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace io {

template <typename U>
void put_le(std::ostream& os, U v) {
  static_assert(std::is_integral_v<U>);
  std::array<char, sizeof(U)> b{};
  for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff);
  os.write(b.data(), b.size());
}

template <typename U>
U get_le(std::istream& is) {
  static_assert(std::is_integral_v<U>);
  std::array<unsigned char, sizeof(U)> b{};
  if (!is.read(reinterpret_cast<char*>(b.data()), b.size())) throw FormatError("unexpected end of stream");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= std::uint64_t(b[i]) << (8 * i);
  return static_cast<U>(v);
}

/// Little-endian payload of floating-point values.
template <typename F>
void put_floats(std::ostream& os, const F* data, std::size_t n) {
  using Bits = std::conditional_t<sizeof(F) == 4, std::uint32_t, std::uint64_t>;
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(data), std::streamsize(n * sizeof(F)));
  } else {
    for (std::size_t i = 0; i < n; ++i) put_le<Bits>(os, std::bit_cast<Bits>(data[i]));
  }
}

template <typename F>
void get_floats(std::istream& is, F* data, std::size_t n) {
  using Bits = std::conditional_t<sizeof(F) == 4, std::uint32_t, std::uint64_t>;
  if constexpr (std::endian::native == std::endian::little) {
    if (!is.read(reinterpret_cast<char*>(data), std::streamsize(n * sizeof(F)))) {
      throw FormatError("unexpected end of stream");
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) data[i] = std::bit_cast<F>(get_le<Bits>(is));
  }
}

inline std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  return os;
}

inline std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  return is;
}

}  // namespace io

// ---------------------------------------------------------------------------
// Image and label files: 16-byte header
//   magic[4] ("HSIM" | "HSLB"), dtype u16, channels u16, height u32, width u32
// followed by the raw little-endian payload.

inline constexpr std::array<char, 4> kImageMagic = {'H', 'S', 'I', 'M'};
inline constexpr std::array<char, 4> kLabelMagic = {'H', 'S', 'L', 'B'};
inline constexpr std::uint16_t kDtypeF32 = 1;
inline constexpr std::uint16_t kDtypeU8 = 2;

struct RasterHeader {
  std::array<char, 4> magic{};
  std::uint16_t dtype = 0;
  std::uint16_t channels = 0;
  std::uint32_t height = 0;
  std::uint32_t width = 0;
};

inline void write_header(std::ostream& os, const RasterHeader& h) {
  os.write(h.magic.data(), 4);
  io::put_le(os, h.dtype);
  io::put_le(os, h.channels);
  io::put_le(os, h.height);
  io::put_le(os, h.width);
}

inline RasterHeader read_header(std::istream& is) {
  RasterHeader h;
  if (!is.read(h.magic.data(), 4)) throw FormatError("raster: truncated header");
  h.dtype = io::get_le<std::uint16_t>(is);
  h.channels = io::get_le<std::uint16_t>(is);
  h.height = io::get_le<std::uint32_t>(is);
  h.width = io::get_le<std::uint32_t>(is);
  return h;
}

inline void write_image(std::ostream& os, const MultiChannelImage& img) {
  write_header(os, {kImageMagic, kDtypeF32, std::uint16_t(img.channels()), std::uint32_t(img.height()),
                    std::uint32_t(img.width())});
  io::put_floats(os, img.pixels.ptr(), img.pixels.size());
}

inline MultiChannelImage read_image(std::istream& is) {
  const RasterHeader h = read_header(is);
  if (h.magic != kImageMagic) throw FormatError("image: bad magic");
  if (h.dtype != kDtypeF32) throw FormatError("image: unsupported dtype " + std::to_string(h.dtype));
  MultiChannelImage img(h.channels, h.height, h.width);
  io::get_floats(is, img.pixels.ptr(), img.pixels.size());
  return img;
}

inline void write_labels(std::ostream& os, const LabelMap& labels) {
  write_header(os, {kLabelMagic, kDtypeU8, 1, std::uint32_t(labels.height), std::uint32_t(labels.width)});
  os.write(reinterpret_cast<const char*>(labels.codes.data()), std::streamsize(labels.codes.size()));
}

inline LabelMap read_labels(std::istream& is) {
  const RasterHeader h = read_header(is);
  if (h.magic != kLabelMagic) throw FormatError("labels: bad magic");
  if (h.dtype != kDtypeU8 || h.channels != 1) throw FormatError("labels: expected one u8 channel");
  LabelMap m(h.height, h.width);
  if (!is.read(reinterpret_cast<char*>(m.codes.data()), std::streamsize(m.codes.size()))) {
    throw FormatError("labels: truncated payload");
  }
  for (auto c : m.codes) {
    if (c >= kNumClasses && c != kUnlabeled) throw FormatError("labels: invalid class code " + std::to_string(c));
  }
  return m;
}

inline void save_image(const std::filesystem::path& path, const MultiChannelImage& img) {
  auto os = io::open_out(path);
  write_image(os, img);
}

inline MultiChannelImage load_image(const std::filesystem::path& path) {
  auto is = io::open_in(path);
  return read_image(is);
}

inline void save_labels(const std::filesystem::path& path, const LabelMap& labels) {
  auto os = io::open_out(path);
  write_labels(os, labels);
}

inline LabelMap load_labels(const std::filesystem::path& path) {
  auto is = io::open_in(path);
  return read_labels(is);
}

// ---------------------------------------------------------------------------
// Manifest: a header line, then one tab-separated record per item:
//   id, image path, label path ("-" if none), split, fold (-1 if none)
// Paths are relative to the manifest's directory.

struct ManifestEntry {
  std::uint64_t id = 0;
  std::string image;
  std::string label;
  Split split = Split::none;
  int fold = -1;

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct Manifest {
  std::uint64_t seed = 0;
  std::vector<ManifestEntry> entries;

  [[nodiscard]] std::size_t size() const { return entries.size(); }
  friend bool operator==(const Manifest&, const Manifest&) = default;
};

inline void write_manifest(std::ostream& os, const Manifest& m) {
  os << "# hemaseg-manifest v1 rng=" << CounterRng::kName << " seed=" << m.seed << "\n";
  for (const auto& e : m.entries) {
    os << e.id << '\t' << e.image << '\t' << (e.label.empty() ? "-" : e.label) << '\t' << split_name(e.split) << '\t'
       << e.fold << '\n';
  }
}

inline Manifest read_manifest(std::istream& is) {
  Manifest m;
  std::string line;
  if (!std::getline(is, line) || !line.starts_with("# hemaseg-manifest v1")) {
    throw FormatError("manifest: missing header line");
  }
  if (auto pos = line.find(" seed="); pos != std::string::npos) m.seed = std::stoull(line.substr(pos + 6));
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    ManifestEntry e;
    std::string split, label;
    if (!std::getline(ls, split, '\t')) throw FormatError("manifest: line " + std::to_string(lineno));
    e.id = std::stoull(split);
    if (!std::getline(ls, e.image, '\t') || !std::getline(ls, label, '\t') || !std::getline(ls, split, '\t') ||
        !(ls >> e.fold)) {
      throw FormatError("manifest: malformed line " + std::to_string(lineno));
    }
    e.label = label == "-" ? "" : label;
    e.split = parse_split(split);
    m.entries.push_back(std::move(e));
  }
  std::unordered_set<std::uint64_t> seen;
  for (const auto& e : m.entries) {
    if (!seen.insert(e.id).second) throw FormatError("manifest: duplicate id " + std::to_string(e.id));
  }
  return m;
}

inline void save_manifest(const std::filesystem::path& path, const Manifest& m) {
  auto os = io::open_out(path);
  write_manifest(os, m);
}

inline Manifest load_manifest(const std::filesystem::path& path) {
  auto is = io::open_in(path);
  return read_manifest(is);
}

}  // namespace hemaseg
