// Checkpoint container, version 1. All integers and reals little-endian.
//
//   magic    8 bytes  "DTMCKPT\0"
//   version  u32      1
//   reserved u32      0
//   config   6 x u64  vocab_size d_model n_heads n_layers d_ff max_seq
//   tensors  f64[]    ModelWeights::for_each_tensor order, row-major
//   masks    u8[]     one byte per weight, layer-major then kind order

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "dtm/model.hpp"

namespace dtm {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'D', 'T', 'M', 'C', 'K', 'P', 'T', '\0'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  void read(void* dst, std::size_t n) {
    need(n);
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }
  bool done() const noexcept { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw FormatError("checkpoint truncated");
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const ToyModel& model) {
  std::vector<std::uint8_t> out;
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  put(out, kVersion);
  put(out, std::uint32_t{0});
  const auto& c = model.config();
  for (std::size_t v : {c.vocab_size, c.d_model, c.n_heads, c.n_layers, c.d_ff, c.max_seq}) {
    put(out, static_cast<std::uint64_t>(v));
  }
  model.weights().for_each_tensor([&](const std::string&, std::span<const double> s) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(s.data());
    out.insert(out.end(), p, p + s.size_bytes());
  });
  for (const auto& id : model.components()) {
    const auto bits = model.mask(id).bits();
    out.insert(out.end(), bits.begin(), bits.end());
  }
  return out;
}

ToyModel deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader in(bytes);
  char magic[8];
  in.read(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof magic) != 0) throw FormatError("not a checkpoint (bad magic)");
  const auto version = in.get<std::uint32_t>();
  if (version != kVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  in.get<std::uint32_t>();
  ModelConfig cfg;
  cfg.vocab_size = in.get<std::uint64_t>();
  cfg.d_model = in.get<std::uint64_t>();
  cfg.n_heads = in.get<std::uint64_t>();
  cfg.n_layers = in.get<std::uint64_t>();
  cfg.d_ff = in.get<std::uint64_t>();
  cfg.max_seq = in.get<std::uint64_t>();
  try {
    cfg.validate();
  } catch (const ArgumentError& e) {
    throw FormatError(std::string("checkpoint config invalid: ") + e.what());
  }
  ToyModel model(cfg);
  model.weights().for_each_tensor([&](const std::string& name, std::span<double> s) {
    in.read(s.data(), s.size_bytes());
    for (double v : s) {
      if (!std::isfinite(v)) throw FormatError("non-finite value in tensor " + name);
    }
  });
  for (const auto& id : model.components()) {
    Mask m = model.mask(id);
    auto bits = m.bits();
    in.read(bits.data(), bits.size());
    for (auto b : bits) {
      if (b > 1) throw FormatError("mask entry outside {0,1} in " + id.key());
    }
    model.set_mask(id, std::move(m));
  }
  if (!in.done()) throw FormatError("trailing bytes after checkpoint payload");
  return model;
}

void save_checkpoint(const ToyModel& model, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed: " + path.string());
}

ToyModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace dtm
