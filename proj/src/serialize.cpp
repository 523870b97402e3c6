#include "apt/serialize.hpp"

#include "apt/rng.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace apt {

namespace {

constexpr char kMagic[4] = {'A', 'P', 'T', 'C'};

std::string dtype_name(Dtype d) { return d == Dtype::f64 ? "f64" : "u8"; }

Dtype dtype_from_name(const std::string& s) {
  if (s == "f64") return Dtype::f64;
  if (s == "u8") return Dtype::u8;
  throw std::runtime_error("checkpoint: unknown dtype " + s);
}

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

}  // namespace

const NamedArray* Checkpoint::find(const std::string& name) const {
  for (const auto& a : arrays)
    if (a.name == name) return &a;
  return nullptr;
}

const Tensor& Checkpoint::tensor(const std::string& name) const {
  const NamedArray* a = find(name);
  if (!a) throw std::out_of_range("checkpoint: missing array " + name);
  return a->data;
}

void Checkpoint::add(const std::string& name, Tensor t, Dtype dtype) {
  if (find(name)) throw std::invalid_argument("checkpoint: duplicate array " + name);
  arrays.push_back({name, dtype, std::move(t)});
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  nlohmann::json header;
  header["meta"] = ckpt.meta;
  auto& arr = header["arrays"] = nlohmann::json::array();
  for (const auto& a : ckpt.arrays) {
    if (a.dtype == Dtype::u8) {
      for (int64_t i = 0; i < a.data.size(); ++i) {
        double v = a.data[i];
        if (v != std::floor(v) || v < 0.0 || v > 255.0)
          throw std::invalid_argument("checkpoint: u8 array " + a.name +
                                      " holds non-u8 value " + std::to_string(v));
      }
    }
    arr.push_back({{"name", a.name}, {"shape", a.data.shape()}, {"dtype", dtype_name(a.dtype)}});
  }
  std::string hdr = header.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("checkpoint: cannot open for write: " + path);
  os.write(kMagic, 4);
  write_pod<uint32_t>(os, kCheckpointVersion);
  write_pod<uint64_t>(os, hdr.size());
  os.write(hdr.data(), static_cast<std::streamsize>(hdr.size()));
  for (const auto& a : ckpt.arrays) {
    if (a.dtype == Dtype::f64) {
      os.write(reinterpret_cast<const char*>(a.data.data()),
               static_cast<std::streamsize>(a.data.size() * sizeof(double)));
    } else {
      std::vector<uint8_t> buf(static_cast<size_t>(a.data.size()));
      for (int64_t i = 0; i < a.data.size(); ++i) buf[i] = static_cast<uint8_t>(a.data[i]);
      os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    }
  }
  if (!os) throw std::runtime_error("checkpoint: write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  uint32_t version = read_pod<uint32_t>(is);
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported format version " + std::to_string(version) +
                             " in " + path);
  uint64_t hlen = read_pod<uint64_t>(is);
  std::string hdr(hlen, '\0');
  is.read(hdr.data(), static_cast<std::streamsize>(hlen));
  if (!is) throw std::runtime_error("checkpoint: truncated header in " + path);
  nlohmann::json header = nlohmann::json::parse(hdr);

  Checkpoint out;
  out.meta = header.at("meta");
  for (const auto& a : header.at("arrays")) {
    NamedArray na;
    na.name = a.at("name").get<std::string>();
    na.dtype = dtype_from_name(a.at("dtype").get<std::string>());
    Shape shape = a.at("shape").get<Shape>();
    na.data = Tensor(shape);
    if (na.dtype == Dtype::f64) {
      is.read(reinterpret_cast<char*>(na.data.data()),
              static_cast<std::streamsize>(na.data.size() * sizeof(double)));
    } else {
      std::vector<uint8_t> buf(static_cast<size_t>(na.data.size()));
      is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
      for (int64_t i = 0; i < na.data.size(); ++i) na.data[i] = static_cast<double>(buf[i]);
    }
    if (!is) throw std::runtime_error("checkpoint: truncated payload in " + path);
    out.arrays.push_back(std::move(na));
  }
  return out;
}

std::string hex64(uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[i] = digits[v & 0xF];
    v >>= 4;
  }
  return s;
}

uint64_t hash_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("hash_file: cannot open " + path);
  uint64_t h = 0xcbf29ce484222325ULL;
  char buf[65536];
  while (is) {
    is.read(buf, sizeof(buf));
    std::streamsize n = is.gcount();
    for (std::streamsize i = 0; i < n; ++i) {
      h ^= static_cast<uint8_t>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

std::string hash_file_hex(const std::string& path) { return hex64(hash_file(path)); }

std::string hash_json_hex(const nlohmann::json& j) {
  std::string s = j.dump();  // nlohmann dumps object keys sorted: canonical
  return hex64(fnv1a64(s));
}

std::string read_text_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open for write " + path);
  os.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!os) throw std::runtime_error("write failed " + path);
}

}  // namespace apt
