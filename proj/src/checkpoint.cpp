#include "semshift/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace semshift {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'S', 'S', 'C', 'K', 'P', 'T', '0', '1'};
constexpr std::uint32_t kMaxRank = 8;

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}
  template <typename U>
  void pod(const U& v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof(U));
  }
  void bytes(const void* data, std::size_t n) { out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n)); }

 private:
  std::ostream& out_;
};

class Reader {
 public:
  Reader(std::istream& in, const std::filesystem::path& path) : in_(in), path_(path) {}
  template <typename U>
  U pod() {
    U v{};
    bytes(&v, sizeof(U));
    return v;
  }
  void bytes(void* data, std::size_t n) {
    in_.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    if (!in_) fail("truncated file");
  }
  [[noreturn]] void fail(const std::string& what) const {
    throw CheckpointError("checkpoint " + path_.string() + ": " + what);
  }

 private:
  std::istream& in_;
  const std::filesystem::path& path_;
};

std::size_t dtype_size(DType d) { return d == DType::F32 ? 4 : 8; }

}  // namespace

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <std::floating_point T>
void Checkpoint::put(const std::string& name, const Shape& shape, std::span<const T> values) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("checkpoint entry '" + name + "': shape " + shape_to_string(shape) + " does not match " +
                     std::to_string(values.size()) + " values");
  }
  if (shape.size() > kMaxRank) throw ShapeError("checkpoint entry '" + name + "': rank too large");
  Entry e{dtype_of<T>(), shape, std::vector<unsigned char>(values.size_bytes())};
  std::memcpy(e.payload.data(), values.data(), values.size_bytes());
  entries_[name] = std::move(e);
}

std::vector<std::string> Checkpoint::names() const {
  std::vector<std::string> out;
  for (const auto& [name, _] : entries_) out.push_back(name);
  return out;
}

template <std::floating_point T>
void Checkpoint::read_into(const std::string& name, const Shape& shape, std::span<T> out) const {
  const auto it = entries_.find(name);
  if (it == entries_.end()) throw CheckpointError("checkpoint has no tensor '" + name + "'");
  const auto& e = it->second;
  if (e.dtype != dtype_of<T>()) throw CheckpointError("checkpoint tensor '" + name + "' has a different dtype");
  if (e.shape != shape) {
    throw CheckpointError("checkpoint tensor '" + name + "' has shape " + shape_to_string(e.shape) + ", expected " +
                          shape_to_string(shape));
  }
  std::memcpy(out.data(), e.payload.data(), e.payload.size());
}

void Checkpoint::save(const std::filesystem::path& path) const {
  // Write to a sibling file first so an interrupted save never truncates an
  // existing checkpoint.
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint " + tmp.string());
    Writer w(out);
    w.bytes(kMagic, sizeof kMagic);
    w.pod(kVersion);
    w.pod(fingerprint_);
    w.pod(static_cast<std::uint64_t>(metadata_.size()));
    w.bytes(metadata_.data(), metadata_.size());
    w.pod(static_cast<std::uint64_t>(entries_.size()));
    for (const auto& [name, e] : entries_) {
      w.pod(static_cast<std::uint32_t>(name.size()));
      w.bytes(name.data(), name.size());
      w.pod(static_cast<std::uint8_t>(e.dtype));
      w.pod(static_cast<std::uint32_t>(e.shape.size()));
      for (auto d : e.shape) w.pod(static_cast<std::uint64_t>(d));
      w.bytes(e.payload.data(), e.payload.size());
    }
    if (!out) throw CheckpointError("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  Reader r(in, path);
  char magic[sizeof kMagic];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof kMagic) != 0) r.fail("bad magic");
  const auto version = r.pod<std::uint32_t>();
  if (version != kVersion) r.fail("unsupported version " + std::to_string(version));
  Checkpoint ck(r.pod<std::uint64_t>());
  const auto meta_len = r.pod<std::uint64_t>();
  if (meta_len > (1ULL << 30)) r.fail("implausible metadata length");
  ck.metadata_.resize(meta_len);
  r.bytes(ck.metadata_.data(), meta_len);
  const auto count = r.pod<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = r.pod<std::uint32_t>();
    if (name_len > 4096) r.fail("implausible tensor name length");
    std::string name(name_len, '\0');
    r.bytes(name.data(), name_len);
    const auto dtype = static_cast<DType>(r.pod<std::uint8_t>());
    if (dtype != DType::F32 && dtype != DType::F64) r.fail("unknown dtype for '" + name + "'");
    const auto rank = r.pod<std::uint32_t>();
    if (rank > kMaxRank) r.fail("implausible rank for '" + name + "'");
    Shape shape(rank);
    std::uint64_t numel = 1;
    for (auto& d : shape) {
      d = static_cast<std::size_t>(r.pod<std::uint64_t>());
      numel *= d;
      if (numel > (1ULL << 32)) r.fail("implausible size for '" + name + "'");
    }
    Entry e{dtype, std::move(shape), std::vector<unsigned char>(numel * dtype_size(dtype))};
    r.bytes(e.payload.data(), e.payload.size());
    if (!ck.entries_.emplace(name, std::move(e)).second) r.fail("duplicate tensor '" + name + "'");
  }
  if (in.peek() != std::char_traits<char>::eof()) r.fail("trailing bytes");
  return ck;
}

Checkpoint Checkpoint::load(const std::filesystem::path& path, std::uint64_t expected_fingerprint) {
  auto ck = load(path);
  if (ck.fingerprint() != expected_fingerprint) {
    throw CheckpointError("checkpoint " + path.string() + " was written for a different configuration");
  }
  return ck;
}

#define SEMSHIFT_INSTANTIATE(T)                                                                        \
  template void Checkpoint::put<T>(const std::string&, const Shape&, std::span<const T>);              \
  template void Checkpoint::read_into<T>(const std::string&, const Shape&, std::span<T>) const;

SEMSHIFT_INSTANTIATE(float)
SEMSHIFT_INSTANTIATE(double)

}  // namespace semshift
