#include "mdpd/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>
#include <set>

#include "mdpd/errors.hpp"

namespace mdpd {

namespace {

void put_u16(std::ostream& out, std::uint16_t v) {
  const char b[2] = {static_cast<char>(v & 0xff), static_cast<char>(v >> 8)};
  out.write(b, 2);
}

void put_u32(std::ostream& out, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b, 4);
}

void put_f32(std::ostream& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

struct Reader {
  std::ifstream in;
  std::string path;

  explicit Reader(const std::string& p) : in(p, std::ios::binary), path(p) {
    if (!in) throw IoError("cannot open checkpoint '" + p + "'");
  }

  void bytes(char* dst, std::size_t n) {
    in.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n)
      throw IoError("truncated checkpoint '" + path + "'");
  }

  std::uint16_t u16() {
    unsigned char b[2];
    bytes(reinterpret_cast<char*>(b), 2);
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
  }

  std::uint32_t u32() {
    unsigned char b[4];
    bytes(reinterpret_cast<char*>(b), 4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) |
           (static_cast<std::uint32_t>(b[3]) << 24);
  }

  float f32() {
    const std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
};

}  // namespace

void save_checkpoint(const std::string& path,
                     const std::vector<Parameter<double>*>& params) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint '" + path + "'");
  out.write(kCheckpointMagic, 4);
  put_u16(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const Parameter<double>* p : params) {
    put_u32(out, static_cast<std::uint32_t>(p->name.size()));
    out.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    put_u32(out, 2);  // rank
    put_u32(out, static_cast<std::uint32_t>(p->value.rows()));
    put_u32(out, static_cast<std::uint32_t>(p->value.cols()));
    for (Index i = 0; i < p->value.rows(); ++i)
      for (Index j = 0; j < p->value.cols(); ++j)
        put_f32(out, static_cast<float>(p->value(i, j)));
  }
  out.flush();
  if (!out) throw IoError("failed writing checkpoint '" + path + "'");
}

std::vector<NamedTensor> load_checkpoint(const std::string& path) {
  Reader r(path);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw IoError("'" + path + "' is not a checkpoint (bad magic)");
  const std::uint16_t version = r.u16();
  if (version != kCheckpointVersion)
    throw IoError("checkpoint '" + path + "' has unsupported version " +
                  std::to_string(version));
  const std::uint32_t count = r.u32();
  std::vector<NamedTensor> out;
  out.reserve(count);
  for (std::uint32_t k = 0; k < count; ++k) {
    NamedTensor t;
    const std::uint32_t name_len = r.u32();
    t.name.resize(name_len);
    if (name_len > 0) r.bytes(t.name.data(), name_len);
    const std::uint32_t rank = r.u32();
    if (rank != 2)
      throw IoError("checkpoint '" + path + "': tensor '" + t.name +
                    "' has unsupported rank " + std::to_string(rank));
    const std::uint32_t rows = r.u32();
    const std::uint32_t cols = r.u32();
    t.value.resize(rows, cols);
    for (Index i = 0; i < t.value.rows(); ++i)
      for (Index j = 0; j < t.value.cols(); ++j)
        t.value(i, j) = static_cast<double>(r.f32());
    out.push_back(std::move(t));
  }
  return out;
}

void load_into(const std::string& path,
               const std::vector<Parameter<double>*>& params) {
  std::vector<NamedTensor> tensors = load_checkpoint(path);
  std::map<std::string, NamedTensor*> by_name;
  for (NamedTensor& t : tensors) {
    if (!by_name.emplace(t.name, &t).second)
      throw IoError("checkpoint '" + path + "' repeats tensor '" + t.name + "'");
  }
  std::set<std::string> wanted;
  for (const Parameter<double>* p : params) wanted.insert(p->name);
  for (const NamedTensor& t : tensors)
    if (!wanted.count(t.name))
      throw IoError("checkpoint '" + path + "' has unexpected tensor '" + t.name +
                    "'");
  for (Parameter<double>* p : params) {
    auto it = by_name.find(p->name);
    if (it == by_name.end())
      throw IoError("checkpoint '" + path + "' is missing tensor '" + p->name + "'");
    const NamedTensor& t = *it->second;
    if (t.value.rows() != p->value.rows() || t.value.cols() != p->value.cols())
      throw IoError("checkpoint '" + path + "': tensor '" + p->name + "' is " +
                    std::to_string(t.value.rows()) + "x" +
                    std::to_string(t.value.cols()) + ", model expects " +
                    std::to_string(p->value.rows()) + "x" +
                    std::to_string(p->value.cols()));
    p->value = t.value;
  }
}

std::uint64_t file_fnv1a(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::uint64_t h = 1469598103934665603ull;
  char buf[4096];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    const std::streamsize n = in.gcount();
    for (std::streamsize i = 0; i < n; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ull;
    }
    if (!in) break;
  }
  return h;
}

}  // namespace mdpd
