#include "stgc/checkpoint.hpp"

#include <string>

#include "stgc/binio.hpp"
#include "stgc/error.hpp"

namespace stgc {

namespace {

void write_config(binio::Writer& w, const ModelConfig& c) {
  for (std::size_t v : {c.hidden_size, c.intermediate_size, c.num_experts, c.top_k, c.num_layers,
                        c.num_classes, c.input_dim}) {
    w.u32(static_cast<std::uint32_t>(v));
  }
  w.f64(c.tau);
  w.f64(c.alpha);
  w.f64(c.beta);
  w.u32(c.cel_kind == CelKind::CeLike ? 0 : 1);
  w.u8(c.capacity_factor ? 1 : 0);
  w.f64(c.capacity_factor.value_or(0.0));
  w.u8(c.bpr ? 1 : 0);
}

ModelConfig read_config(binio::Reader& r) {
  ModelConfig c;
  c.hidden_size = r.u32();
  c.intermediate_size = r.u32();
  c.num_experts = r.u32();
  c.top_k = r.u32();
  c.num_layers = r.u32();
  c.num_classes = r.u32();
  c.input_dim = r.u32();
  c.tau = r.f64();
  c.alpha = r.f64();
  c.beta = r.f64();
  const std::uint32_t kind = r.u32();
  require(kind <= 1, ErrorKind::Parse, "'" + r.source() + "': bad cel_kind tag");
  c.cel_kind = kind == 0 ? CelKind::CeLike : CelKind::MseLike;
  const bool has_cap = r.u8() != 0;
  const double cap = r.f64();
  if (has_cap) c.capacity_factor = cap;
  c.bpr = r.u8() != 0;
  return c;
}

}  // namespace

std::vector<char> serialize_model(const Model& model) {
  binio::Writer w;
  w.bytes("STGC", 4);
  w.u32(kCheckpointFormatVersion);
  write_config(w, model.config);
  for (const auto& t : tensors(const_cast<Parameters&>(model.params))) {
    for (double v : t.data) w.f64(v);
  }
  return w.buffer();
}

Model deserialize_model(const std::vector<char>& bytes, const std::string& source) {
  binio::Reader r(bytes, source);
  char magic[4];
  r.bytes(magic, 4);
  require(std::string(magic, 4) == "STGC", ErrorKind::Parse,
          "'" + source + "' is not an STGC checkpoint (bad magic)");
  const std::uint32_t version = r.u32();
  require(version == kCheckpointFormatVersion, ErrorKind::Parse,
          "'" + source + "': unsupported checkpoint version " + std::to_string(version));
  Model m;
  m.config = read_config(r);
  try {
    m.config.validate();
  } catch (const Error& e) {
    fail(ErrorKind::Parse, "'" + source + "': invalid model config: " + e.what());
  }
  m.params = zeros_like(m.config);
  for (auto& t : tensors(m.params)) {
    for (double& v : t.data) v = r.f64();
  }
  require(r.at_end(), ErrorKind::Parse, "'" + source + "': trailing bytes after tensors");
  return m;
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  binio::Writer w;
  const auto bytes = serialize_model(model);
  w.bytes(bytes.data(), bytes.size());
  w.save(path);
}

Model load_checkpoint(const std::filesystem::path& path) {
  return deserialize_model(binio::read_file(path), path.string());
}

}  // namespace stgc
