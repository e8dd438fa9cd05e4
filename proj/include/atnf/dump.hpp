#pragma once

#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "atnf/attention.hpp"
#include "atnf/weights_io.hpp"

namespace atnf {

// Attention/saliency dump stream:
//
//   "ATDP" | u8 version (1)
//   per record: u32 header_len | JSON header {kind, layer, head, first_query, rows, cols} | f32 rows*cols
//   u32 index_len | JSON index {"records":[{offset, kind, layer, head}], "segmentation":{..}, "tokens":[..]}
//   u64 index_offset | "ATDI"
//
// Layer-level records (saliency) carry "head": null.
inline constexpr char dump_magic[4] = {'A', 'T', 'D', 'P'};
inline constexpr char dump_index_magic[4] = {'A', 'T', 'D', 'I'};
inline constexpr std::uint8_t dump_format_version = 1;

struct dump_entry {
  std::string kind = "attention";
  std::size_t layer = 0;
  std::optional<std::size_t> head;
  std::size_t first_query = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<real> data;

  real at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

struct dump_file {
  std::optional<token_segmentation> segmentation;
  std::vector<token_id> tokens;
  std::vector<dump_entry> entries;
};

inline dump_entry to_dump_entry(const attention_record& rec) {
  return {"attention", rec.layer, rec.head, rec.first_query, rec.rows, rec.cols, rec.data};
}

inline attention_record to_attention_record(const dump_entry& e) {
  if (e.kind != "attention" || !e.head) throw format_error("dump entry is not a per-head attention record");
  return {e.layer, *e.head, e.first_query, e.rows, e.cols, e.data};
}

inline void write_dump(std::ostream& os, const dump_file& f) {
  os.write(dump_magic, 4);
  io::put_u8(os, dump_format_version);
  nlohmann::json index = {{"records", nlohmann::json::array()}};
  std::uint64_t offset = 5;
  for (const auto& e : f.entries) {
    if (e.data.size() != e.rows * e.cols) throw dimension_error("dump entry data does not match rows x cols");
    nlohmann::json h = {{"kind", e.kind},   {"layer", e.layer}, {"first_query", e.first_query},
                        {"rows", e.rows},   {"cols", e.cols}};
    h["head"] = e.head ? nlohmann::json(*e.head) : nlohmann::json(nullptr);
    const std::string hs = h.dump();
    index["records"].push_back({{"offset", offset}, {"kind", e.kind}, {"layer", e.layer}, {"head", h["head"]}});
    io::put_u32(os, io::narrow_u32(hs.size(), "dump header"));
    os.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (real v : e.data) io::put_f32(os, static_cast<float>(v));
    offset += 4 + hs.size() + 4 * e.data.size();
  }
  if (f.segmentation) index["segmentation"] = segmentation_to_json(*f.segmentation);
  index["tokens"] = f.tokens;
  const std::string is = index.dump();
  io::put_u32(os, io::narrow_u32(is.size(), "dump index"));
  os.write(is.data(), static_cast<std::streamsize>(is.size()));
  io::put_u64(os, offset);
  os.write(dump_index_magic, 4);
  if (!os) throw format_error("failed writing dump stream");
}

inline dump_file read_dump(std::istream& is) {
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (bytes.size() < 17 || bytes.compare(0, 4, dump_magic, 4) != 0) throw format_error("not an ATDP dump (bad magic)");
  if (static_cast<std::uint8_t>(bytes[4]) != dump_format_version) throw format_error("unsupported dump version");
  if (bytes.compare(bytes.size() - 4, 4, dump_index_magic, 4) != 0) throw format_error("dump trailer missing");
  std::istringstream in(bytes);
  in.seekg(static_cast<std::streamoff>(bytes.size() - 12));
  const auto index_offset = io::get_u64(in, "index offset");
  if (index_offset + 4 > bytes.size() - 12) throw format_error("dump index offset out of range");

  dump_file f;
  try {
    in.seekg(static_cast<std::streamoff>(index_offset));
    const auto ilen = io::get_u32(in, "index length");
    std::string istr(ilen, '\0');
    in.read(istr.data(), ilen);
    io::need(in, "index");
    const auto index = nlohmann::json::parse(istr);
    if (index.contains("segmentation")) {
      const auto& js = index["segmentation"];
      token_segmentation s;
      s.sys = {js.at("sys").at(0).get<std::size_t>(), js.at("sys").at(1).get<std::size_t>()};
      s.vis = {js.at("vis").at(0).get<std::size_t>(), js.at("vis").at(1).get<std::size_t>()};
      s.instr = {js.at("instr").at(0).get<std::size_t>(), js.at("instr").at(1).get<std::size_t>()};
      s.resp_start = s.instr.end;
      f.segmentation = s;
    }
    f.tokens = index.value("tokens", std::vector<token_id>{});

    in.seekg(5);
    for (const auto& ir : index.at("records")) {
      if (static_cast<std::uint64_t>(in.tellg()) != ir.at("offset").get<std::uint64_t>())
        throw format_error("dump index does not match record layout");
      const auto hlen = io::get_u32(in, "record header length");
      std::string hs(hlen, '\0');
      in.read(hs.data(), hlen);
      io::need(in, "record header");
      const auto h = nlohmann::json::parse(hs);
      dump_entry e;
      e.kind = h.at("kind").get<std::string>();
      e.layer = h.at("layer").get<std::size_t>();
      if (!h.at("head").is_null()) e.head = h.at("head").get<std::size_t>();
      e.first_query = h.at("first_query").get<std::size_t>();
      e.rows = h.at("rows").get<std::size_t>();
      e.cols = h.at("cols").get<std::size_t>();
      if (e.rows * e.cols * 4 > bytes.size()) throw format_error("dump record larger than file");
      e.data.resize(e.rows * e.cols);
      for (real& v : e.data) v = io::get_f32(in, "record data");
      f.entries.push_back(std::move(e));
    }
    if (static_cast<std::uint64_t>(in.tellg()) != index_offset) throw format_error("trailing bytes before dump index");
  } catch (const nlohmann::json::exception& e) {
    throw format_error(std::string("malformed dump JSON: ") + e.what());
  }
  return f;
}

inline void save_dump(const std::string& path, const dump_file& f) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw format_error("cannot open '" + path + "' for writing");
  write_dump(os, f);
}

inline dump_file load_dump(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw format_error("cannot open dump '" + path + "'");
  return read_dump(is);
}

}  // namespace atnf
