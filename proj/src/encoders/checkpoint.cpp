#include "stclip/checkpoint.hpp"

#include <zlib.h>

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

#include "stclip/errors.hpp"

namespace stclip {

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

constexpr std::array<char, 4> kMagic{'S', 'T', 'C', 'K'};
constexpr std::array<std::string_view, 5> kKnownPrefixes{"img.", "txt.", "clip.", "det.", "meta."};

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

std::uint32_t crc_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; checkpoints beyond 4 GiB are fed in pieces.
  std::size_t off = 0;
  while (off < bytes.size()) {
    const std::size_t n = std::min<std::size_t>(bytes.size() - off, 1u << 30);
    crc = crc32(crc, bytes.data() + off, static_cast<uInt>(n));
    off += n;
  }
  return static_cast<std::uint32_t>(crc);
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : bytes_(b) {}

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n)
      throw FormatError(std::string("checkpoint truncated while reading ") + what, pos_);
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const ParamStore& store) {
  std::vector<std::uint8_t> out(kMagic.begin(), kMagic.end());
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(store.size()));
  for (const auto& e : store.entries()) {
    if (e.name.size() > 0xFFFF) throw InputError("tensor name too long: " + e.name.substr(0, 40));
    put<std::uint16_t>(out, static_cast<std::uint16_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    const auto& shape = e.value.shape();
    if (shape.size() > 0xFF) throw InputError("tensor '" + e.name + "' has too many dimensions");
    put<std::uint8_t>(out, static_cast<std::uint8_t>(shape.size()));
    for (std::size_t d : shape) {
      if (d > 0xFFFFFFFFu) throw InputError("tensor '" + e.name + "' dimension exceeds 32 bits");
      put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    }
    const auto data = e.value.data();
    const auto* p = reinterpret_cast<const std::uint8_t*>(data.data());
    out.insert(out.end(), p, p + data.size() * sizeof(float));
  }
  put<std::uint32_t>(out, crc_of(out));
  return out;
}

LoadedCheckpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  const auto magic = r.take(4, "magic");
  if (!std::equal(magic.begin(), magic.end(), kMagic.begin()))
    throw FormatError("not a checkpoint: bad magic", 0);
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version), 4);
  const auto count = r.get<std::uint32_t>("tensor count");

  LoadedCheckpoint out;
  std::set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t entry_start = r.pos();
    const auto name_len = r.get<std::uint16_t>("name length");
    const auto raw = r.take(name_len, "tensor name");
    std::string name(raw.begin(), raw.end());
    if (!seen.insert(name).second)
      throw FormatError("duplicate tensor '" + name + "'", entry_start);
    const auto ndim = r.get<std::uint8_t>("rank");
    Shape shape(ndim);
    std::size_t numel = 1;
    for (auto& d : shape) {
      const std::size_t at = r.pos();
      d = r.get<std::uint32_t>("dimension");
      if (d == 0) throw FormatError("tensor '" + name + "' has a zero dimension", at);
      if (numel > (bytes.size() / sizeof(float)) / d)
        throw FormatError("tensor '" + name + "' is larger than the file", at);
      numel *= d;
    }
    const auto payload = r.take(numel * sizeof(float), "tensor payload");
    std::vector<float> data(numel);
    std::memcpy(data.data(), payload.data(), payload.size());
    bool known = false;
    for (auto p : kKnownPrefixes) known = known || name.starts_with(p);
    if (!known) out.warnings.push_back("unknown tensor '" + name + "' loaded as-is");
    out.store.add(name, Tensor(std::move(shape), std::move(data)));
  }
  const std::size_t crc_at = r.pos();
  const auto stored = r.get<std::uint32_t>("checksum");
  if (r.pos() != bytes.size())
    throw FormatError("trailing bytes after checksum", r.pos());
  if (stored != crc_of(bytes.first(crc_at)))
    throw FormatError("checksum mismatch", crc_at);
  return out;
}

void save_checkpoint(const ParamStore& store, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(store);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw InputError("cannot write checkpoint " + path.string());
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw InputError("failed writing checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot read checkpoint " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                        std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace stclip
