#pragma once

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include <json.hpp>

#include "atnf/model.hpp"

namespace atnf {

// Binary weight container, all integers little-endian:
//
//   "ATNF" | u8 version (1)
//   u32 num_layers, num_heads, model_dim, head_dim, vocab_size, ffn_dim, max_seq_len | f64 rope_base
//   u8 has_segmentation | [u32 sys.begin, sys.end, vis.begin, vis.end, instr.begin, instr.end]
//   u32 tensor_count
//   per tensor: u32 name_len | name bytes | u32 rank | u32 dims[rank] | f32 data (row-major)
inline constexpr char weight_magic[4] = {'A', 'T', 'N', 'F'};
inline constexpr std::uint8_t weight_format_version = 1;

namespace io {

inline void put_u8(std::ostream& os, std::uint8_t v) { os.put(static_cast<char>(v)); }

inline void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
  os.write(b, 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
  os.write(b, 8);
}

inline void put_f32(std::ostream& os, float f) { put_u32(os, std::bit_cast<std::uint32_t>(f)); }
inline void put_f64(std::ostream& os, double d) { put_u64(os, std::bit_cast<std::uint64_t>(d)); }

inline void need(std::istream& is, const char* what) {
  if (!is) throw format_error(std::string("truncated input while reading ") + what);
}

inline std::uint8_t get_u8(std::istream& is, const char* what) {
  char c = 0;
  is.get(c);
  need(is, what);
  return static_cast<std::uint8_t>(c);
}

inline std::uint32_t get_u32(std::istream& is, const char* what) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  need(is, what);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline std::uint64_t get_u64(std::istream& is, const char* what) {
  const std::uint64_t lo = get_u32(is, what), hi = get_u32(is, what);
  return lo | (hi << 32);
}

inline float get_f32(std::istream& is, const char* what) { return std::bit_cast<float>(get_u32(is, what)); }
inline double get_f64(std::istream& is, const char* what) { return std::bit_cast<double>(get_u64(is, what)); }

inline std::uint32_t narrow_u32(std::size_t v, const char* what) {
  if (v > 0xFFFFFFFFu) throw format_error(std::string(what) + " does not fit in 32 bits");
  return static_cast<std::uint32_t>(v);
}

}  // namespace io

inline void write_weights(std::ostream& os, const model_weights& w) {
  w.validate();
  const auto& c = w.config;
  os.write(weight_magic, 4);
  io::put_u8(os, weight_format_version);
  for (std::size_t v : {c.num_layers, c.num_heads, c.model_dim, c.head_dim, c.vocab_size, c.ffn_dim, c.max_seq_len})
    io::put_u32(os, io::narrow_u32(v, "config field"));
  io::put_f64(os, c.rope_base);
  io::put_u8(os, w.segmentation ? 1 : 0);
  if (w.segmentation) {
    const auto& s = *w.segmentation;
    for (std::size_t v : {s.sys.begin, s.sys.end, s.vis.begin, s.vis.end, s.instr.begin, s.instr.end})
      io::put_u32(os, io::narrow_u32(v, "segmentation bound"));
  }
  std::uint32_t count = 0;
  model_weights::visit_tensors(w, [&](const std::string&, const auto&, const auto&) { ++count; });
  io::put_u32(os, count);
  model_weights::visit_tensors(
      w, [&](const std::string& name, const std::vector<std::size_t>& dims, std::span<const real> data) {
        io::put_u32(os, io::narrow_u32(name.size(), "tensor name"));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        io::put_u32(os, io::narrow_u32(dims.size(), "rank"));
        for (std::size_t d : dims) io::put_u32(os, io::narrow_u32(d, "dimension"));
        for (real v : data) io::put_f32(os, static_cast<float>(v));
      });
  if (!os) throw format_error("failed writing weight stream");
}

inline model_weights read_weights(std::istream& is) {
  char magic[4] = {};
  is.read(magic, 4);
  io::need(is, "magic");
  if (std::memcmp(magic, weight_magic, 4) != 0) throw format_error("not an ATNF weight file (bad magic)");
  const auto version = io::get_u8(is, "version");
  if (version != weight_format_version)
    throw format_error("unsupported ATNF version " + std::to_string(version));
  model_config c;
  c.num_layers = io::get_u32(is, "config");
  c.num_heads = io::get_u32(is, "config");
  c.model_dim = io::get_u32(is, "config");
  c.head_dim = io::get_u32(is, "config");
  c.vocab_size = io::get_u32(is, "config");
  c.ffn_dim = io::get_u32(is, "config");
  c.max_seq_len = io::get_u32(is, "config");
  c.rope_base = io::get_f64(is, "config");
  c.validate();
  model_weights w = model_weights::zeros(c);
  if (io::get_u8(is, "segmentation flag")) {
    token_segmentation s;
    s.sys.begin = io::get_u32(is, "segmentation");
    s.sys.end = io::get_u32(is, "segmentation");
    s.vis.begin = io::get_u32(is, "segmentation");
    s.vis.end = io::get_u32(is, "segmentation");
    s.instr.begin = io::get_u32(is, "segmentation");
    s.instr.end = io::get_u32(is, "segmentation");
    s.resp_start = s.instr.end;
    s.validate(s.prompt_length());
    w.segmentation = s;
  }

  std::map<std::string, std::pair<std::vector<std::size_t>, std::span<real>>> slots;
  model_weights::visit_tensors(w, [&](const std::string& name, const std::vector<std::size_t>& dims,
                                      std::span<real> data) { slots.emplace(name, std::pair{dims, data}); });
  const auto count = io::get_u32(is, "tensor count");
  if (count != slots.size())
    throw format_error("expected " + std::to_string(slots.size()) + " tensors, file has " + std::to_string(count));
  for (std::uint32_t t = 0; t < count; ++t) {
    const auto len = io::get_u32(is, "tensor name length");
    if (len > 4096) throw format_error("tensor name too long");
    std::string name(len, '\0');
    is.read(name.data(), len);
    io::need(is, "tensor name");
    const auto it = slots.find(name);
    if (it == slots.end()) throw format_error("unexpected tensor '" + name + "'");
    const auto rank = io::get_u32(is, "rank");
    std::vector<std::size_t> dims(rank);
    for (auto& d : dims) d = io::get_u32(is, "dims");
    if (dims != it->second.first) throw format_error("shape mismatch for tensor '" + name + "'");
    for (real& v : it->second.second) v = io::get_f32(is, "tensor data");
    slots.erase(it);
  }
  w.validate();
  return w;
}

inline void save_weights(const std::string& path, const model_weights& w) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw format_error("cannot open '" + path + "' for writing");
  write_weights(os, w);
}

inline model_weights load_weights(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw format_error("cannot open weight file '" + path + "'");
  return read_weights(is);
}

// JSON mirror for tiny fixtures:
// {"format":"atnf-json","version":1,"config":{...},"segmentation":{...}?,
//  "tensors":{"name":{"shape":[...],"data":[...]}}}
inline nlohmann::json config_to_json(const model_config& c) {
  return {{"num_layers", c.num_layers}, {"num_heads", c.num_heads},     {"model_dim", c.model_dim},
          {"head_dim", c.head_dim},     {"vocab_size", c.vocab_size},   {"ffn_dim", c.ffn_dim},
          {"max_seq_len", c.max_seq_len}, {"rope_base", c.rope_base}};
}

inline nlohmann::json segmentation_to_json(const token_segmentation& s) {
  return {{"sys", {s.sys.begin, s.sys.end}}, {"vis", {s.vis.begin, s.vis.end}}, {"instr", {s.instr.begin, s.instr.end}}};
}

inline nlohmann::json weights_to_json(const model_weights& w) {
  nlohmann::json j;
  j["format"] = "atnf-json";
  j["version"] = weight_format_version;
  j["config"] = config_to_json(w.config);
  if (w.segmentation) j["segmentation"] = segmentation_to_json(*w.segmentation);
  auto& t = j["tensors"] = nlohmann::json::object();
  model_weights::visit_tensors(
      w, [&](const std::string& name, const std::vector<std::size_t>& dims, std::span<const real> data) {
        nlohmann::json arr = nlohmann::json::array();
        for (real v : data) arr.push_back(static_cast<float>(v));
        t[name] = {{"shape", dims}, {"data", std::move(arr)}};
      });
  return j;
}

inline model_weights weights_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format") != "atnf-json") throw format_error("not an atnf-json document");
    if (j.at("version").get<int>() != weight_format_version) throw format_error("unsupported atnf-json version");
    const auto& jc = j.at("config");
    model_config c;
    c.num_layers = jc.at("num_layers").get<std::size_t>();
    c.num_heads = jc.at("num_heads").get<std::size_t>();
    c.model_dim = jc.at("model_dim").get<std::size_t>();
    c.head_dim = jc.at("head_dim").get<std::size_t>();
    c.vocab_size = jc.at("vocab_size").get<std::size_t>();
    c.ffn_dim = jc.at("ffn_dim").get<std::size_t>();
    c.max_seq_len = jc.at("max_seq_len").get<std::size_t>();
    c.rope_base = jc.at("rope_base").get<real>();
    model_weights w = model_weights::zeros(c);
    if (j.contains("segmentation")) {
      const auto& js = j.at("segmentation");
      token_segmentation s;
      s.sys = {js.at("sys").at(0).get<std::size_t>(), js.at("sys").at(1).get<std::size_t>()};
      s.vis = {js.at("vis").at(0).get<std::size_t>(), js.at("vis").at(1).get<std::size_t>()};
      s.instr = {js.at("instr").at(0).get<std::size_t>(), js.at("instr").at(1).get<std::size_t>()};
      s.resp_start = s.instr.end;
      s.validate(s.prompt_length());
      w.segmentation = s;
    }
    const auto& jt = j.at("tensors");
    std::size_t seen = 0;
    model_weights::visit_tensors(
        w, [&](const std::string& name, const std::vector<std::size_t>& dims, std::span<real> data) {
          if (!jt.contains(name)) throw format_error("missing tensor '" + name + "'");
          const auto& e = jt.at(name);
          if (e.at("shape").get<std::vector<std::size_t>>() != dims)
            throw format_error("shape mismatch for tensor '" + name + "'");
          const auto& d = e.at("data");
          if (d.size() != data.size()) throw format_error("data length mismatch for tensor '" + name + "'");
          for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<float>(d[i].get<double>());
          ++seen;
        });
    if (seen != jt.size()) throw format_error("atnf-json contains unknown tensors");
    w.validate();
    return w;
  } catch (const nlohmann::json::exception& e) {
    throw format_error(std::string("malformed atnf-json: ") + e.what());
  }
}

}  // namespace atnf
