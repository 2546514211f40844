#include "qgs/checkpoint.hpp"

#include <unordered_set>

#include "qgs/binio.hpp"

namespace qgs {

namespace {
constexpr char kMagic[4] = {'Q', 'G', 'S', 'C'};
constexpr std::uint8_t kVersion = 1;
}  // namespace

const Tensor<float>* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

void Checkpoint::add(std::string name, Tensor<float> value) {
  if (find(name)) throw Error("duplicate checkpoint tensor '" + name + "'");
  tensors.emplace_back(std::move(name), std::move(value));
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  binio::Writer w;
  w.put_bytes(kMagic, 4);
  w.put<std::uint8_t>(kVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    w.put_string16(name);
    if (t.rank() > 255) throw Error("tensor rank too large for checkpoint");
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape()) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    w.put_array(t.storage());
  }
  return std::move(w.bytes());
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  binio::Reader r(bytes);
  r.section("magic");
  r.need(4);
  for (char m : kMagic)
    if (r.get<char>() != m) r.fail("bad magic, expected QGSC");
  r.section("version");
  if (const auto v = r.get<std::uint8_t>(); v != kVersion) r.fail("unsupported version " + std::to_string(v));
  r.section("tensor_count");
  const auto count = r.get<std::uint32_t>();
  Checkpoint ckpt;
  for (std::uint32_t i = 0; i < count; ++i) {
    r.section("tensor[" + std::to_string(i) + "]");
    std::string name = r.get_string16();
    r.section("tensor '" + name + "'");
    const auto rank = r.get<std::uint8_t>();
    Shape shape(rank);
    for (auto& d : shape) d = r.get<std::uint32_t>();
    std::size_t n = 1;
    for (auto d : shape) {
      if (d != 0 && n > r.remaining() / d) r.fail("tensor size overruns input");
      n *= d;
    }
    auto values = r.get_array<float>(n);
    if (ckpt.find(name)) r.fail("duplicate tensor name");
    ckpt.add(std::move(name), Tensor<float>(std::move(shape), std::move(values)));
  }
  r.section("trailer");
  if (!r.at_end()) r.fail("trailing bytes after last tensor");
  return ckpt;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  binio::write_file(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::string& path) {
  return decode_checkpoint(binio::read_file(path));
}

Checkpoint to_checkpoint(const ParamSet<float>& params) {
  Checkpoint ckpt;
  for (std::size_t i = 0; i < params.size(); ++i) ckpt.add(params[i].name, params[i].value);
  return ckpt;
}

void apply_checkpoint(const Checkpoint& ckpt, ParamSet<float>& params) {
  std::unordered_set<std::string> seen;
  for (const auto& [name, t] : ckpt.tensors) {
    auto* p = params.find(name);
    if (!p) throw Error("checkpoint tensor '" + name + "' is not a model parameter");
    if (p->value.shape() != t.shape()) {
      throw ShapeError("checkpoint tensor '" + name + "' has shape " + to_string(t.shape()) +
                       ", model expects " + to_string(p->value.shape()));
    }
    seen.insert(name);
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!seen.count(params[i].name)) {
      throw Error("checkpoint lacks parameter '" + params[i].name + "'");
    }
  }
  for (const auto& [name, t] : ckpt.tensors) params.find(name)->value = t;
}

}  // namespace qgs
