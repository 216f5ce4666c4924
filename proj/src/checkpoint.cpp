#include "picn/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <set>

namespace picn {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint payloads assume a little-endian host");

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t crc_of(const std::uint8_t* data, std::size_t n) {
  return static_cast<std::uint32_t>(crc32(crc32(0L, Z_NULL, 0), data, static_cast<uInt>(n)));
}

std::size_t dtype_size(DType d) { return d == DType::f32 ? 4 : 8; }
const char* dtype_name(DType d) { return d == DType::f32 ? "f32" : "f64"; }

template <typename T>
constexpr DType dtype_of() {
  return sizeof(T) == 4 ? DType::f32 : DType::f64;
}

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& b, std::size_t end) : bytes_(b), end_(end) {}
  std::size_t pos() const { return pos_; }
  void need(std::size_t n, const char* what) const {
    if (end_ - pos_ < n)
      throw CheckpointError("checkpoint truncated reading " + std::string(what) + " at offset " +
                            std::to_string(pos_));
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return bytes_[pos_++];
  }
  std::vector<std::uint8_t> take(std::size_t n, const char* what) {
    need(n, what);
    std::vector<std::uint8_t> out(bytes_.begin() + pos_, bytes_.begin() + pos_ + n);
    pos_ += n;
    return out;
  }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

}  // namespace

template <typename T>
CheckpointEntry make_entry(const std::string& name, const Shape& shape, const T* values) {
  CheckpointEntry e{name, dtype_of<T>(), shape, {}};
  const auto n = numel_of(shape);
  e.payload.resize(n * sizeof(T));
  if (n) std::memcpy(e.payload.data(), values, n * sizeof(T));
  return e;
}

template <typename T>
std::vector<T> entry_values(const CheckpointEntry& e) {
  if (e.dtype != dtype_of<T>())
    throw CheckpointError("entry " + e.name + " holds " + dtype_name(e.dtype) + " but " +
                          dtype_name(dtype_of<T>()) + " was requested");
  std::vector<T> out(numel_of(e.shape));
  if (!out.empty()) std::memcpy(out.data(), e.payload.data(), out.size() * sizeof(T));
  return out;
}

template CheckpointEntry make_entry<float>(const std::string&, const Shape&, const float*);
template CheckpointEntry make_entry<double>(const std::string&, const Shape&, const double*);
template std::vector<float> entry_values<float>(const CheckpointEntry&);
template std::vector<double> entry_values<double>(const CheckpointEntry&);

std::vector<std::uint8_t> encode_checkpoint(const std::vector<CheckpointEntry>& entries) {
  std::vector<std::uint8_t> out{'P', 'I', 'C', 'N'};
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    if (e.shape.size() > 255) throw CheckpointError("entry " + e.name + " has too many dimensions");
    if (e.payload.size() != numel_of(e.shape) * dtype_size(e.dtype))
      throw CheckpointError("entry " + e.name + " payload does not match its shape");
    put_u32(out, static_cast<std::uint32_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    out.push_back(static_cast<std::uint8_t>(e.dtype));
    out.push_back(static_cast<std::uint8_t>(e.shape.size()));
    for (auto d : e.shape) put_u32(out, static_cast<std::uint32_t>(d));
    out.insert(out.end(), e.payload.begin(), e.payload.end());
  }
  put_u32(out, crc_of(out.data(), out.size()));
  return out;
}

std::vector<CheckpointEntry> decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), "PICN", 4) != 0)
    throw CheckpointError("not a checkpoint (bad magic or too short)");
  const auto body = bytes.size() - 4;
  std::uint32_t stored = 0;
  for (int i = 0; i < 4; ++i) stored |= std::uint32_t(bytes[body + i]) << (8 * i);
  const auto computed = crc_of(bytes.data(), body);
  if (stored != computed) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "checkpoint CRC mismatch over bytes 0..%zu (stored %08x at offset %zu, computed %08x)",
                  body - 1, stored, body, computed);
    throw CheckpointError(buf);
  }
  Reader r(bytes, body);
  r.take(4, "magic");
  const auto version = r.u32("version");
  if (version != kCheckpointVersion)
    throw CheckpointError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  const auto count = r.u32("entry count");
  std::vector<CheckpointEntry> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    const auto len = r.u32("name length");
    const auto name = r.take(len, "name");
    e.name.assign(name.begin(), name.end());
    const auto dt = r.u8("dtype");
    if (dt > 1) throw CheckpointError("entry " + e.name + " has unknown dtype code " + std::to_string(dt));
    e.dtype = static_cast<DType>(dt);
    const auto rank = r.u8("rank");
    for (int k = 0; k < rank; ++k) e.shape.push_back(r.u32("extent"));
    e.payload = r.take(numel_of(e.shape) * dtype_size(e.dtype), "payload");
    entries.push_back(std::move(e));
  }
  if (r.pos() != body) throw CheckpointError("trailing bytes after last entry at offset " + std::to_string(r.pos()));
  return entries;
}

void write_checkpoint(const std::filesystem::path& path, const std::vector<CheckpointEntry>& entries) {
  const auto bytes = encode_checkpoint(entries);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw CheckpointError(tmp + ": cannot open for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError(tmp + ": write failed");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw CheckpointError(path.string() + ": " + ec.message());
}

std::vector<CheckpointEntry> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(path.string() + ": cannot open");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_checkpoint(bytes);
  } catch (const CheckpointError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

namespace {

template <typename T>
void add_optimizer(std::vector<CheckpointEntry>& out, const std::string& prefix, const StateDict<T>& sd,
                   const AdamState<T>& st) {
  const double step = static_cast<double>(st.step);
  out.push_back(make_entry<double>(prefix + ".step", {}, &step));
  if (st.m.empty()) return;  // no update yet: moments are implicitly zero
  for (std::size_t i = 0; i < sd.params.size(); ++i) {
    const auto& [name, p] = sd.params[i];
    out.push_back(make_entry<T>(prefix + ".m." + name, p.shape(), st.m[i].data()));
    out.push_back(make_entry<T>(prefix + ".v." + name, p.shape(), st.v[i].data()));
  }
}

}  // namespace

std::vector<CheckpointEntry> session_entries(const TrainSession& s) {
  std::vector<CheckpointEntry> out;
  const double step = static_cast<double>(s.step);
  out.push_back(make_entry<double>("meta.step", {}, &step));
  const auto sd = s.model.state();
  for (const auto& [name, t] : sd.params) out.push_back(make_entry<float>(name, t.shape(), t.data().data()));
  for (const auto& [name, t] : sd.buffers) out.push_back(make_entry<float>(name, t.shape(), t.data().data()));
  add_optimizer(out, "opt.gen", s.model.generator_state(), s.opt.gen);
  add_optimizer(out, "opt.d1", s.model.disc_rec_state(), s.opt.d1);
  add_optimizer(out, "opt.d2", s.model.disc_gen_state(), s.opt.d2);
  return out;
}

namespace {

class EntryTable {
 public:
  explicit EntryTable(const std::vector<CheckpointEntry>& entries) {
    for (const auto& e : entries)
      if (!table_.emplace(e.name, &e).second) throw CheckpointError("duplicate checkpoint entry " + e.name);
  }
  bool has(const std::string& name) const { return table_.count(name) != 0; }
  const CheckpointEntry& take(const std::string& name) {
    const auto it = table_.find(name);
    if (it == table_.end()) throw CheckpointError("checkpoint is missing entry " + name);
    used_.insert(name);
    return *it->second;
  }
  template <typename T>
  void into(const std::string& name, const Shape& shape, T* dst) {
    const auto& e = take(name);
    if (e.dtype != dtype_of<T>())
      throw CheckpointError("entry " + name + " is " + dtype_name(e.dtype) + " but this session uses " +
                            dtype_name(dtype_of<T>()) + " (no implicit conversion)");
    if (e.shape != shape)
      throw CheckpointError("entry " + name + " has shape " + shape_str(e.shape) + ", expected " + shape_str(shape));
    std::memcpy(dst, e.payload.data(), e.payload.size());
  }
  double scalar(const std::string& name) {
    const auto& e = take(name);
    if (e.dtype != DType::f64 || !e.shape.empty()) throw CheckpointError("entry " + name + " must be an f64 scalar");
    double v;
    std::memcpy(&v, e.payload.data(), 8);
    return v;
  }
  void check_all_used() const {
    for (const auto& [name, e] : table_)
      if (!used_.count(name)) throw CheckpointError("checkpoint has unexpected entry " + name);
  }

 private:
  std::map<std::string, const CheckpointEntry*> table_;
  std::set<std::string> used_;
};

template <typename T>
void restore_optimizer(EntryTable& t, const std::string& prefix, const StateDict<T>& sd, AdamState<T>& st) {
  st = AdamState<T>{};
  st.step = static_cast<std::uint64_t>(t.scalar(prefix + ".step"));
  if (sd.params.empty() || !t.has(prefix + ".m." + sd.params.front().first)) return;
  st.m.resize(sd.params.size());
  st.v.resize(sd.params.size());
  for (std::size_t i = 0; i < sd.params.size(); ++i) {
    const auto& [name, p] = sd.params[i];
    st.m[i].resize(p.numel());
    st.v[i].resize(p.numel());
    t.into(prefix + ".m." + name, p.shape(), st.m[i].data());
    t.into(prefix + ".v." + name, p.shape(), st.v[i].data());
  }
}

}  // namespace

void restore_session(TrainSession& s, const std::vector<CheckpointEntry>& entries) {
  EntryTable t(entries);
  const auto step = t.scalar("meta.step");
  const auto sd = s.model.state();
  for (const auto& [name, p] : sd.params) {
    auto h = p;
    t.into(name, h.shape(), h.mutable_data().data());
  }
  for (const auto& [name, b] : sd.buffers) {
    auto h = b;
    t.into(name, h.shape(), h.mutable_data().data());
  }
  restore_optimizer(t, "opt.gen", s.model.generator_state(), s.opt.gen);
  restore_optimizer(t, "opt.d1", s.model.disc_rec_state(), s.opt.d1);
  restore_optimizer(t, "opt.d2", s.model.disc_gen_state(), s.opt.d2);
  t.check_all_used();
  s.step = static_cast<std::size_t>(step);
}

void save_session(const std::filesystem::path& path, const TrainSession& s) {
  write_checkpoint(path, session_entries(s));
}

void load_session(const std::filesystem::path& path, TrainSession& s) {
  const auto entries = read_checkpoint(path);
  try {
    restore_session(s, entries);
  } catch (const CheckpointError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

}  // namespace picn
