#include "checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>

#include "error.hpp"

namespace catf {

const Section* Container::find(const std::string& name) const {
  for (const Section& s : sections) {
    if (s.name == name) return &s;
  }
  return nullptr;
}

const Section& Container::at(const std::string& name) const {
  const Section* s = find(name);
  if (!s) throw CheckpointError("checkpoint has no section '" + name + "'");
  return *s;
}

namespace {

std::size_t dtype_size(SectionType t) {
  switch (t) {
    case SectionType::kF32: return 4;
    case SectionType::kU8: return 1;
    case SectionType::kU32: return 4;
    case SectionType::kU64: return 8;
  }
  return 0;
}

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(T{b_[pos_ + i]} << (8 * i));
    pos_ += sizeof(T);
    return v;
  }

  std::span<const std::uint8_t> bytes(std::size_t n, const char* what) {
    need(n, what);
    auto s = b_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (b_.size() - pos_ < n) {
      throw CheckpointError(std::string("truncated checkpoint reading ") + what + " at byte " +
                            std::to_string(pos_));
    }
  }

  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_container(const Container& c) {
  std::vector<std::uint8_t> out = {'C', 'A', 'T', 'F'};
  put<std::uint32_t>(out, Container::kVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(c.sections.size()));
  for (const Section& s : c.sections) {
    if (s.name.size() > 0xffff) throw CheckpointError("section name too long");
    if (s.dims.size() > 0xff) throw CheckpointError("section rank too large");
    std::size_t n = 1;
    for (auto d : s.dims) n *= d;
    if (n * dtype_size(s.dtype) != s.payload.size()) {
      throw CheckpointError("section '" + s.name + "' payload does not match its dims");
    }
    put<std::uint16_t>(out, static_cast<std::uint16_t>(s.name.size()));
    out.insert(out.end(), s.name.begin(), s.name.end());
    out.push_back(static_cast<std::uint8_t>(s.dtype));
    out.push_back(static_cast<std::uint8_t>(s.dims.size()));
    for (auto d : s.dims) put<std::uint32_t>(out, d);
    out.insert(out.end(), s.payload.begin(), s.payload.end());
  }
  return out;
}

Container decode_container(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  auto magic = r.bytes(4, "magic");
  if (std::memcmp(magic.data(), "CATF", 4) != 0) throw CheckpointError("bad checkpoint magic");
  const auto version = r.get<std::uint32_t>("version");
  if (version != Container::kVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = r.get<std::uint32_t>("section count");
  Container c;
  for (std::uint32_t i = 0; i < count; ++i) {
    Section s;
    const auto len = r.get<std::uint16_t>("section name length");
    auto name = r.bytes(len, "section name");
    s.name.assign(name.begin(), name.end());
    const auto dtype = r.get<std::uint8_t>("dtype");
    if (dtype > 3) {
      throw CheckpointError("section '" + s.name + "' has unknown dtype " + std::to_string(dtype));
    }
    s.dtype = static_cast<SectionType>(dtype);
    const auto ndim = r.get<std::uint8_t>("rank");
    std::size_t n = 1;
    for (std::uint8_t d = 0; d < ndim; ++d) {
      s.dims.push_back(r.get<std::uint32_t>("dims"));
      n *= s.dims.back();
    }
    auto payload = r.bytes(n * dtype_size(s.dtype), "payload");
    s.payload.assign(payload.begin(), payload.end());
    if (c.find(s.name)) throw CheckpointError("duplicate section '" + s.name + "'");
    c.sections.push_back(std::move(s));
  }
  if (!r.done()) {
    throw CheckpointError("trailing bytes after the last section at byte " + std::to_string(r.pos()));
  }
  return c;
}

Section tensor_section(const std::string& name, const Tensor& t) {
  Section s;
  s.name = name;
  s.dtype = SectionType::kF32;
  for (auto d : t.shape) s.dims.push_back(static_cast<std::uint32_t>(d));
  s.payload.reserve(4 * t.numel());
  for (float f : t.data) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put<std::uint32_t>(s.payload, bits);
  }
  return s;
}

Tensor section_tensor(const Section& s) {
  if (s.dtype != SectionType::kF32) throw CheckpointError("section '" + s.name + "' is not f32");
  Shape shape(s.dims.begin(), s.dims.end());
  Tensor t(shape);
  Reader r(s.payload);
  for (float& f : t.data) {
    const auto bits = r.get<std::uint32_t>("f32");
    std::memcpy(&f, &bits, 4);
  }
  return t;
}

namespace {

Section bytes_section(const std::string& name, const std::string& text) {
  Section s;
  s.name = name;
  s.dtype = SectionType::kU8;
  s.dims = {static_cast<std::uint32_t>(text.size())};
  s.payload.assign(text.begin(), text.end());
  return s;
}

Section threshold_section(int task, const Tensor& phi) {
  Section s;
  s.name = "thresholds/" + std::to_string(task);
  s.dtype = SectionType::kU8;
  put<std::uint32_t>(s.payload, static_cast<std::uint32_t>(task));
  put<std::uint32_t>(s.payload, static_cast<std::uint32_t>(phi.numel()));
  for (float f : phi.data) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put<std::uint32_t>(s.payload, bits);
  }
  s.dims = {static_cast<std::uint32_t>(s.payload.size())};
  return s;
}

void add_gate(Container& c, const std::string& prefix, const GatingMLP& g) {
  c.sections.push_back(tensor_section(prefix + "/w1", g.w1));
  c.sections.push_back(tensor_section(prefix + "/b1", g.b1));
  c.sections.push_back(tensor_section(prefix + "/w2", g.w2));
  c.sections.push_back(tensor_section(prefix + "/b2", g.b2));
}

GatingMLP read_gate(const Container& c, const std::string& prefix) {
  GatingMLP g;
  g.w1 = section_tensor(c.at(prefix + "/w1"));
  g.b1 = section_tensor(c.at(prefix + "/b1"));
  g.w2 = section_tensor(c.at(prefix + "/w2"));
  g.b2 = section_tensor(c.at(prefix + "/b2"));
  if (g.w1.ndim() != 2 || g.w2.ndim() != 2 || g.w2.dim(0) != g.w1.dim(1) ||
      g.b1.numel() != g.w1.dim(1) || g.b2.numel() != g.w2.dim(1)) {
    throw CheckpointError("inconsistent gate shapes under '" + prefix + "'");
  }
  return g;
}

void expect_shape(const Tensor& got, const Shape& want, const std::string& name) {
  if (got.shape != want) {
    throw CheckpointError("section '" + name + "' has shape " + shape_str(got.shape) +
                          ", expected " + shape_str(want));
  }
}

}  // namespace

Container model_to_container(const Model& model, const std::string& config_text,
                             std::span<const int> class_order) {
  Container c;
  c.sections.push_back(bytes_section("config", config_text));
  {
    Section s;
    s.name = "split/class_order";
    s.dtype = SectionType::kU32;
    s.dims = {static_cast<std::uint32_t>(class_order.size())};
    for (int v : class_order) put<std::uint32_t>(s.payload, static_cast<std::uint32_t>(v));
    c.sections.push_back(std::move(s));
  }
  for (const auto& e : model.backbone.params().entries()) {
    c.sections.push_back(tensor_section("backbone/" + e.name, *e.tensor));
  }
  for (int k : model.bank.tasks()) {
    if (!model.bank.is_finalized(k)) continue;
    c.sections.push_back(threshold_section(k, model.bank.thresholds(k)));
  }
  for (int k : model.heads.tasks()) {
    if (!model.heads.is_finalized(k)) continue;
    const Head& h = model.heads.get(k);
    c.sections.push_back(tensor_section("heads/" + std::to_string(k) + "/W", h.weight));
    c.sections.push_back(tensor_section("heads/" + std::to_string(k) + "/b", h.bias));
  }
  add_gate(c, "gate", model.gate);
  for (std::size_t j = 0; j < model.gate_history.size(); ++j) {
    add_gate(c, "gate_history/" + std::to_string(j), model.gate_history[j]);
  }
  Section rng;
  rng.name = "rng";
  rng.dtype = SectionType::kU64;
  rng.dims = {1};
  put<std::uint64_t>(rng.payload, model.rng_state);
  c.sections.push_back(std::move(rng));
  return c;
}

LoadedCheckpoint container_to_model(const Container& c,
                                    const std::function<Model(const std::string&)>& make_model) {
  LoadedCheckpoint out;
  const Section& cfg = c.at("config");
  out.config_text.assign(cfg.payload.begin(), cfg.payload.end());
  out.model = make_model(out.config_text);
  Model& m = out.model;

  const Section& order = c.at("split/class_order");
  if (order.dtype != SectionType::kU32) throw CheckpointError("class order must be u32");
  Reader ro(order.payload);
  for (std::size_t i = 0; i < order.payload.size() / 4; ++i) {
    out.class_order.push_back(static_cast<int>(ro.get<std::uint32_t>("class order")));
  }

  for (auto& e : m.backbone.params().entries()) {
    const std::string name = "backbone/" + e.name;
    Tensor t = section_tensor(c.at(name));
    expect_shape(t, e.tensor->shape, name);
    *e.tensor = std::move(t);
  }

  std::size_t tasks = 0;
  while (c.find("thresholds/" + std::to_string(tasks))) ++tasks;
  for (std::size_t k = 0; k < tasks; ++k) {
    const std::string ks = std::to_string(k);
    const Section& s = c.at("thresholds/" + ks);
    Reader r(s.payload);
    const auto id = r.get<std::uint32_t>("threshold task id");
    const auto count = r.get<std::uint32_t>("threshold count");
    if (id != k) throw CheckpointError("threshold record " + ks + " carries task id " + std::to_string(id));
    Tensor phi({count});
    for (float& f : phi.data) {
      const auto bits = r.get<std::uint32_t>("threshold values");
      std::memcpy(&f, &bits, 4);
    }
    if (!r.done()) throw CheckpointError("trailing bytes in threshold record " + ks);
    m.bank.restore(static_cast<int>(k), std::move(phi), true);

    Head h{section_tensor(c.at("heads/" + ks + "/W")), section_tensor(c.at("heads/" + ks + "/b"))};
    expect_shape(h.weight, {m.config.embed_dim, m.classes_per_task}, "heads/" + ks + "/W");
    expect_shape(h.bias, {m.classes_per_task}, "heads/" + ks + "/b");
    m.heads.restore(static_cast<int>(k), std::move(h), true);
  }

  m.gate = read_gate(c, "gate");
  if (m.gate.w1.shape != Shape{m.config.embed_dim, m.config.embed_dim / 4}) {
    throw CheckpointError("gate input does not match the embedding width");
  }
  for (std::size_t j = 0; c.find("gate_history/" + std::to_string(j) + "/w1"); ++j) {
    m.gate_history.push_back(read_gate(c, "gate_history/" + std::to_string(j)));
  }
  if (m.gate_history.size() != tasks || (tasks > 0 && m.gate.width() != tasks)) {
    throw CheckpointError("gate width and history do not match " + std::to_string(tasks) + " tasks");
  }
  const Section& rng = c.at("rng");
  if (rng.dtype != SectionType::kU64 || rng.payload.size() != 8) throw CheckpointError("bad rng section");
  Reader rr(rng.payload);
  m.rng_state = rr.get<std::uint64_t>("rng");
  return out;
}

void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write '" + tmp + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("short write to '" + tmp + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw CheckpointError("cannot move checkpoint into place at '" + path + "'");
  }
}

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace catf
