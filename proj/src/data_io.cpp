#include "pvc/data_io.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <numbers>
#include <random>
#include <sstream>
#include <string>

namespace pvc {

namespace {

constexpr std::array<std::uint8_t, 4> kMagic{'P', 'V', 'C', 'N'};
constexpr std::size_t kHeaderBytes = 20;
constexpr std::uint32_t kFlagLabels = 1u, kFlagMask = 2u;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  const std::uint8_t* take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw FormatError("truncated PVCN data at byte " + std::to_string(bytes_.size()) + ": " + what + " needs " +
                        std::to_string(n - (bytes_.size() - pos_)) + " more bytes (from offset " +
                        std::to_string(pos_) + ")");
    }
    const std::uint8_t* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint32_t u32(const char* what) { return get_u32(take(4, what)); }
  std::size_t pos() const { return pos_; }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::vector<std::uint8_t>& bytes, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed for " + path.string());
}

}  // namespace

std::vector<std::uint8_t> encode_pvcn(const PointCloud& cloud) {
  cloud.validate();
  const std::size_t n = cloud.size();
  if (n > UINT32_MAX || cloud.channels > UINT32_MAX) throw FormatError("cloud too large for PVCN");
  std::vector<std::uint8_t> out;
  out.reserve(kHeaderBytes + 4 * cloud.positions.size() + 4 * cloud.features.size() + 5 * n);
  for (const std::uint8_t b : kMagic) out.push_back(b);
  put_u32(out, kCloudFormatVersion);
  put_u32(out, static_cast<std::uint32_t>(n));
  put_u32(out, static_cast<std::uint32_t>(cloud.channels));
  put_u32(out, (cloud.has_labels() ? kFlagLabels : 0u) | (cloud.has_mask() ? kFlagMask : 0u));
  for (const float v : cloud.positions) put_u32(out, std::bit_cast<std::uint32_t>(v));
  for (const float v : cloud.features) put_u32(out, std::bit_cast<std::uint32_t>(v));
  for (const std::uint32_t v : cloud.labels) put_u32(out, v);
  out.insert(out.end(), cloud.loss_mask.begin(), cloud.loss_mask.end());
  return out;
}

PointCloud decode_pvcn(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  const std::uint8_t* magic = r.take(4, "magic");
  if (!std::equal(kMagic.begin(), kMagic.end(), magic)) throw FormatError("bad magic at byte 0: not a PVCN file");
  const std::uint32_t version = r.u32("version");
  if (version != kCloudFormatVersion) {
    throw FormatError("unsupported PVCN version " + std::to_string(version) + " at byte 4");
  }
  const std::size_t n = r.u32("point count");
  const std::size_t c = r.u32("channel count");
  const std::uint32_t flags = r.u32("flags");
  if (flags & ~(kFlagLabels | kFlagMask)) throw FormatError("unknown flag bits at byte 16");

  PointCloud cloud;
  cloud.channels = c;
  const std::uint8_t* p = r.take(12 * n, "positions");
  cloud.positions.resize(3 * n);
  for (std::size_t i = 0; i < 3 * n; ++i) cloud.positions[i] = std::bit_cast<float>(get_u32(p + 4 * i));
  p = r.take(4 * n * c, "features");
  cloud.features.resize(n * c);
  for (std::size_t i = 0; i < n * c; ++i) cloud.features[i] = std::bit_cast<float>(get_u32(p + 4 * i));
  if (flags & kFlagLabels) {
    p = r.take(4 * n, "labels");
    cloud.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) cloud.labels[i] = get_u32(p + 4 * i);
  }
  if (flags & kFlagMask) {
    p = r.take(n, "mask");
    cloud.loss_mask.assign(p, p + n);
  }
  if (r.pos() != bytes.size()) {
    throw FormatError("unexpected " + std::to_string(bytes.size() - r.pos()) + " trailing bytes at byte " +
                      std::to_string(r.pos()));
  }
  return cloud;
}

void write_pvcn(const PointCloud& cloud, const std::filesystem::path& path) { write_bytes(encode_pvcn(cloud), path); }

PointCloud read_pvcn(const std::filesystem::path& path) {
  try {
    return decode_pvcn(read_bytes(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_csv(const PointCloud& cloud, const std::filesystem::path& path) {
  cloud.validate();
  if (!cloud.has_labels()) throw FormatError("CSV export needs labels");
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << "x,y,z";
  for (std::size_t f = 0; f < cloud.channels; ++f) out << ",f" << f;
  out << ",label\n";
  char buf[32];
  auto put = [&](float v) {
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    out.write(buf, res.ptr - buf);
  };
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    for (int a = 0; a < 3; ++a) {
      if (a) out << ',';
      put(cloud.positions[3 * i + a]);
    }
    for (std::size_t f = 0; f < cloud.channels; ++f) {
      out << ',';
      put(cloud.features[cloud.channels * i + f]);
    }
    out << ',' << cloud.labels[i] << '\n';
  }
}

PointCloud read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  PointCloud cloud;
  std::string line;
  std::size_t line_no = 0, columns = 0;
  std::vector<std::string_view> fields;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    fields.clear();
    std::string_view rest(line);
    while (true) {
      const auto comma = rest.find(',');
      std::string_view f = rest.substr(0, comma);
      while (!f.empty() && f.front() == ' ') f.remove_prefix(1);
      while (!f.empty() && f.back() == ' ') f.remove_suffix(1);
      fields.push_back(f);
      if (comma == std::string_view::npos) break;
      rest.remove_prefix(comma + 1);
    }
    float first = 0.0f;
    const bool numeric =
        std::from_chars(fields[0].data(), fields[0].data() + fields[0].size(), first).ec == std::errc{};
    if (!numeric && columns == 0 && cloud.positions.empty()) {
      columns = fields.size();
      continue;
    }
    if (columns == 0) columns = fields.size();
    if (fields.size() != columns) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": expected " + std::to_string(columns) +
                        " columns, found " + std::to_string(fields.size()));
    }
    if (columns < 4) throw FormatError(path.string() + ": CSV needs x,y,z and a label column");
    cloud.channels = columns - 4;
    for (std::size_t k = 0; k + 1 < columns; ++k) {
      float v = 0.0f;
      const auto res = std::from_chars(fields[k].data(), fields[k].data() + fields[k].size(), v);
      if (res.ec != std::errc{} || res.ptr != fields[k].data() + fields[k].size()) {
        throw FormatError(path.string() + ":" + std::to_string(line_no) + ": column " + std::to_string(k + 1) +
                          " is not a number");
      }
      (k < 3 ? cloud.positions : cloud.features).push_back(v);
    }
    std::uint32_t label = 0;
    const auto& lf = fields.back();
    const auto res = std::from_chars(lf.data(), lf.data() + lf.size(), label);
    if (res.ec != std::errc{} || res.ptr != lf.data() + lf.size()) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": label is not a non-negative integer");
    }
    cloud.labels.push_back(label);
  }
  if (cloud.positions.empty()) throw FormatError(path.string() + ": no data rows");
  return cloud;
}

void write_cloud(const PointCloud& cloud, const std::filesystem::path& path) {
  if (path.extension() == ".csv") {
    write_csv(cloud, path);
  } else {
    write_pvcn(cloud, path);
  }
}

PointCloud read_cloud(const std::filesystem::path& path) {
  return path.extension() == ".csv" ? read_csv(path) : read_pvcn(path);
}

std::vector<PointCloud> load_dataset(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw FormatError("dataset path " + path.string() + " does not exist");
  if (!std::filesystem::is_directory(path)) return {read_cloud(path)};
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(path)) {
    const auto ext = entry.path().extension();
    if (entry.is_regular_file() && (ext == ".pvcn" || ext == ".csv")) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw FormatError("no .pvcn or .csv files in " + path.string());
  std::vector<PointCloud> out;
  for (const auto& f : files) out.push_back(read_cloud(f));
  return out;
}

std::vector<std::size_t> SyntheticSceneSpec::points_per_shape() const {
  const std::size_t s = num_shapes();
  if (s == 0) throw ConfigError("scene needs at least one shape");
  std::vector<std::size_t> out(s, points / s);
  for (std::size_t i = 0; i < points % s; ++i) ++out[i];
  return out;
}

namespace {

using Vec3 = std::array<double, 3>;

struct Sampler {
  std::mt19937_64 rng;
  double noise_sigma;
  double feature_noise;

  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
  double truncated_normal(double sigma) {
    if (sigma <= 0.0) return 0.0;
    std::normal_distribution<double> d(0.0, sigma);
    while (true) {
      const double v = d(rng);
      if (std::abs(v) <= 3.0 * sigma) return v;
    }
  }

  void emit(PointCloud& cloud, const Vec3& surface, const Vec3& normal, std::uint32_t label) {
    const double offset = truncated_normal(noise_sigma);
    for (int a = 0; a < 3; ++a) cloud.positions.push_back(static_cast<float>(surface[a] + offset * normal[a]));
    std::normal_distribution<double> fn(0.0, feature_noise);
    for (int a = 0; a < 3; ++a) {
      cloud.features.push_back(static_cast<float>(normal[a] + (feature_noise > 0.0 ? fn(rng) : 0.0)));
    }
    cloud.labels.push_back(label);
  }

  void plane(PointCloud& cloud, const Vec3& c, double half, std::size_t n, std::uint32_t label) {
    for (std::size_t i = 0; i < n; ++i) {
      emit(cloud, {c[0] + uniform(-half, half), c[1] + uniform(-half, half), c[2]}, {0.0, 0.0, 1.0}, label);
    }
  }

  void sphere(PointCloud& cloud, const Vec3& c, double r, std::size_t n, std::uint32_t label) {
    std::normal_distribution<double> d(0.0, 1.0);
    for (std::size_t i = 0; i < n; ++i) {
      Vec3 dir{};
      double len = 0.0;
      while (len < 1e-9) {
        dir = {d(rng), d(rng), d(rng)};
        len = std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]);
      }
      for (auto& v : dir) v /= len;
      emit(cloud, {c[0] + r * dir[0], c[1] + r * dir[1], c[2] + r * dir[2]}, dir, label);
    }
  }

  // Five faces; the bottom rests on the floor and is not sampled.
  void box(PointCloud& cloud, const Vec3& c, double h, std::size_t n, std::uint32_t label) {
    std::uniform_int_distribution<int> face(0, 4);
    for (std::size_t i = 0; i < n; ++i) {
      const int f = face(rng);
      const double s = uniform(-h, h), t = uniform(-h, h);
      Vec3 p{}, nrm{};
      switch (f) {
        case 0: p = {h, s, t}; nrm = {1, 0, 0}; break;
        case 1: p = {-h, s, t}; nrm = {-1, 0, 0}; break;
        case 2: p = {s, h, t}; nrm = {0, 1, 0}; break;
        case 3: p = {s, -h, t}; nrm = {0, -1, 0}; break;
        default: p = {s, t, h}; nrm = {0, 0, 1}; break;
      }
      emit(cloud, {c[0] + p[0], c[1] + p[1], c[2] + p[2]}, nrm, label);
    }
  }
};

}  // namespace

SyntheticScene generate_scene(const SyntheticSceneSpec& spec) {
  if (!(spec.extent > 0.0)) throw ConfigError("scene extent must be positive");
  const auto counts = spec.points_per_shape();
  Sampler s{std::mt19937_64(spec.seed), spec.noise_sigma, spec.feature_noise};
  SyntheticScene scene;
  scene.cloud.channels = 3;
  const double half = spec.extent / 2.0;

  std::vector<ShapeKind> kinds;
  kinds.insert(kinds.end(), spec.planes, ShapeKind::plane);
  kinds.insert(kinds.end(), spec.spheres, ShapeKind::sphere);
  kinds.insert(kinds.end(), spec.boxes, ShapeKind::box);

  // Objects sit on the floor at x-y positions whose footprints do not overlap.
  std::vector<std::pair<Vec3, double>> placed;
  std::size_t floor_index = 0;
  for (std::size_t i = 0; i < kinds.size(); ++i) {
    SceneShape shape{kinds[i], {}, 0.0, counts[i]};
    if (kinds[i] == ShapeKind::plane) {
      shape.center = {half, half, 0.35 * static_cast<double>(floor_index++)};
      shape.size = half;
    } else {
      double size = s.uniform(0.12, 0.25) * spec.extent;
      Vec3 c{};
      for (int attempt = 1;; ++attempt) {
        c = {s.uniform(size, spec.extent - size), s.uniform(size, spec.extent - size), size};
        const bool clear = std::all_of(placed.begin(), placed.end(), [&](const auto& q) {
          const double dx = q.first[0] - c[0], dy = q.first[1] - c[1];
          return std::sqrt(dx * dx + dy * dy) > 1.05 * (q.second + size) * std::numbers::sqrt2;
        });
        if (clear) break;
        if (attempt % 50 == 0) size *= 0.9;
      }
      placed.emplace_back(c, size);
      shape.center = c;
      shape.size = size;
    }
    const std::uint32_t label = spec.class_ids[static_cast<std::size_t>(kinds[i])];
    switch (kinds[i]) {
      case ShapeKind::plane: s.plane(scene.cloud, shape.center, shape.size, shape.points, label); break;
      case ShapeKind::sphere: s.sphere(scene.cloud, shape.center, shape.size, shape.points, label); break;
      case ShapeKind::box: s.box(scene.cloud, shape.center, shape.size, shape.points, label); break;
    }
    scene.shapes.push_back(shape);
  }
  return scene;
}

PointCloud generate_object(ShapeKind kind, std::size_t points, std::uint32_t label, std::uint64_t seed,
                           double noise_sigma, double feature_noise) {
  if (points == 0) throw DomainError("object needs at least one point");
  Sampler s{std::mt19937_64(seed), noise_sigma, feature_noise};
  PointCloud cloud;
  cloud.channels = 3;
  const Vec3 c{s.uniform(-0.1, 0.1), s.uniform(-0.1, 0.1), s.uniform(-0.1, 0.1)};
  const double size = s.uniform(0.3, 0.5);
  switch (kind) {
    case ShapeKind::plane: s.plane(cloud, c, size, points, label); break;
    case ShapeKind::sphere: s.sphere(cloud, c, size, points, label); break;
    case ShapeKind::box: s.box(cloud, c, size, points, label); break;
  }
  return cloud;
}

std::vector<Block> split_blocks(const PointCloud& room, double block, double pad) {
  room.validate();
  if (!(block > 0.0) || pad < 0.0) throw ConfigError("block size must be positive and padding non-negative");
  const Bounds b = compute_bounds(room.positions);
  std::array<std::size_t, 2> tiles{};
  for (int a = 0; a < 2; ++a) {
    tiles[a] = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil((b.max[a] - b.min[a]) / block)));
  }
  const std::size_t n = room.size();
  std::vector<std::array<std::size_t, 2>> own(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (int a = 0; a < 2; ++a) {
      const double t = std::floor((room.positions[3 * i + a] - b.min[a]) / block);
      own[i][a] = static_cast<std::size_t>(std::clamp(t, 0.0, static_cast<double>(tiles[a] - 1)));
    }
  }
  std::vector<Block> out;
  for (std::size_t tx = 0; tx < tiles[0]; ++tx) {
    for (std::size_t ty = 0; ty < tiles[1]; ++ty) {
      const double x0 = b.min[0] + static_cast<double>(tx) * block - pad;
      const double y0 = b.min[1] + static_cast<double>(ty) * block - pad;
      const double x1 = x0 + block + 2.0 * pad, y1 = y0 + block + 2.0 * pad;
      Block blk;
      blk.tile = {tx, ty};
      blk.cloud.channels = room.channels;
      bool any_core = false;
      for (std::size_t i = 0; i < n; ++i) {
        const bool core = own[i][0] == tx && own[i][1] == ty;
        const double x = room.positions[3 * i], y = room.positions[3 * i + 1];
        if (!core && (x < x0 || x > x1 || y < y0 || y > y1)) continue;
        const bool unmasked = core && (!room.has_mask() || room.loss_mask[i]);
        any_core = any_core || unmasked;
        blk.source.push_back(i);
        blk.cloud.positions.insert(blk.cloud.positions.end(), room.positions.begin() + 3 * i,
                                   room.positions.begin() + 3 * i + 3);
        blk.cloud.features.insert(blk.cloud.features.end(), room.features.begin() + room.channels * i,
                                  room.features.begin() + room.channels * (i + 1));
        if (room.has_labels()) blk.cloud.labels.push_back(room.labels[i]);
        blk.cloud.loss_mask.push_back(unmasked ? 1 : 0);
      }
      if (any_core) out.push_back(std::move(blk));
    }
  }
  return out;
}

}  // namespace pvc
