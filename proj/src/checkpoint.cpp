#include "pvc/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <fstream>
#include <iterator>
#include <string>

namespace pvc {

namespace {

constexpr std::array<std::uint8_t, 4> kMagic{'P', 'V', 'C', 'K'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_string(std::vector<std::uint8_t>& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.insert(out.end(), s.begin(), s.end());
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  const std::uint8_t* take(std::size_t n, const std::string& what) {
    if (bytes_.size() - pos_ < n) {
      throw FormatError("truncated checkpoint at byte " + std::to_string(bytes_.size()) + ": " + what + " needs " +
                        std::to_string(n - (bytes_.size() - pos_)) + " more bytes");
    }
    const std::uint8_t* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint32_t u32(const std::string& what) {
    const std::uint8_t* p = take(4, what);
    return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
           static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
  }
  std::string str(const std::string& what) {
    const std::size_t n = u32(what + " length");
    const std::uint8_t* p = take(n, what);
    return std::string(p, p + n);
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

NetworkConfig read_header(Reader& r) {
  const std::uint8_t* magic = r.take(4, "magic");
  if (!std::equal(kMagic.begin(), kMagic.end(), magic)) throw FormatError("bad magic: not a PVCK checkpoint");
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const std::string text = r.str("config");
  try {
    return nlohmann::json::parse(text).get<NetworkConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint config is not valid JSON: ") + e.what());
  }
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(Network<float>& net) {
  std::vector<std::uint8_t> out(kMagic.begin(), kMagic.end());
  put_u32(out, kCheckpointVersion);
  put_string(out, nlohmann::json(net.config()).dump());
  const auto params = net.parameters();
  put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    put_string(out, name);
    put_u32(out, static_cast<std::uint32_t>(t->rank()));
    for (const std::size_t e : t->shape()) put_u32(out, static_cast<std::uint32_t>(e));
    for (const float v : t->data()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

void save_checkpoint(Network<float>& net, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(net);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed for " + path.string());
}

NetworkConfig checkpoint_config(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  return read_header(r);
}

void apply_checkpoint(Network<float>& net, const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  const NetworkConfig cfg = read_header(r);
  if (!(cfg == net.config())) throw ConfigError("checkpoint was saved for a different network config");
  auto params = net.parameters();
  const std::size_t count = r.u32("parameter count");
  if (count != params.size()) {
    throw ConfigError("checkpoint holds " + std::to_string(count) + " parameters, network has " +
                      std::to_string(params.size()));
  }
  for (auto& [name, t] : params) {
    const std::string stored = r.str("parameter name");
    if (stored != name) throw ConfigError("checkpoint parameter " + stored + " where " + name + " was expected");
    Shape shape(r.u32(name + " rank"));
    for (auto& e : shape) e = r.u32(name + " extent");
    if (shape != t->shape()) {
      throw ConfigError("checkpoint shape " + shape_str(shape) + " for " + name + " does not match " +
                        shape_str(t->shape()));
    }
    const std::uint8_t* p = r.take(4 * t->numel(), name + " values");
    auto data = t->data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const std::uint32_t bits = static_cast<std::uint32_t>(p[4 * i]) | static_cast<std::uint32_t>(p[4 * i + 1]) << 8 |
                                 static_cast<std::uint32_t>(p[4 * i + 2]) << 16 |
                                 static_cast<std::uint32_t>(p[4 * i + 3]) << 24;
      data[i] = std::bit_cast<float>(bits);
    }
  }
  if (!r.done()) throw FormatError("trailing bytes after checkpoint parameters");
}

Network<float> decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Network<float> net(checkpoint_config(bytes), 0);
  apply_checkpoint(net, bytes);
  return net;
}

Network<float> load_checkpoint(const std::filesystem::path& path) {
  try {
    return decode_checkpoint(read_bytes(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace pvc
