#pragma once

// Model config as JSON; parameter checkpoints as
//
//   bytes 0..7   "SUSCKPT1"
//   bytes 8..15  little-endian uint64 N, length of the JSON header
//   N bytes      JSON header {"config": {...}, "count": d,
//                             "segments": [{"name","offset","length","rows","cols"}...]}
//   8*d bytes    parameters as little-endian IEEE-754 float64

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "model.hpp"

namespace suscept {

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"context_len", c.context_len},
          {"d_model", c.d_model},       {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},       {"bos_token", c.bos()},
          {"layernorm", c.layernorm},   {"tied_embeddings", c.tied_embeddings},
          {"init_std", c.init_std},     {"seed", c.seed}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.context_len = j.value("context_len", c.context_len);
    c.d_model = j.value("d_model", c.d_model);
    c.n_layers = j.value("n_layers", c.n_layers);
    c.n_heads = j.value("n_heads", c.n_heads);
    if (j.contains("bos_token")) c.bos_token = j.at("bos_token").get<TokenId>();
    c.layernorm = j.value("layernorm", c.layernorm);
    c.tied_embeddings = j.value("tied_embeddings", c.tied_embeddings);
    c.init_std = j.value("init_std", c.init_std);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

namespace detail {

inline void put_u64_le(std::ostream& os, std::uint64_t v) {
  std::array<unsigned char, 8> b{};
  for (int i = 0; i < 8; ++i) b[static_cast<std::size_t>(i)] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b.data()), 8);
}

inline std::uint64_t get_u64_le(std::istream& is) {
  std::array<unsigned char, 8> b{};
  if (!is.read(reinterpret_cast<char*>(b.data()), 8)) throw ParseError("checkpoint: truncated file");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[static_cast<std::size_t>(i)];
  return v;
}

constexpr char kCheckpointMagic[9] = "SUSCKPT1";

}  // namespace detail

struct Checkpoint {
  ModelConfig config;
  ParamVector params;
};

inline void save_checkpoint(const std::string& path, const ModelConfig& cfg, const ParamVector& w) {
  detail::require(w.size() == w.layout.size(), "checkpoint: parameter/layout size mismatch");
  nlohmann::json header;
  header["config"] = config_to_json(cfg);
  header["count"] = w.size();
  auto segs = nlohmann::json::array();
  for (const auto& s : w.layout.segments())
    segs.push_back({{"name", s.name}, {"offset", s.offset}, {"length", s.size()}, {"rows", s.rows}, {"cols", s.cols}});
  header["segments"] = segs;
  const std::string text = header.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("checkpoint: cannot open '" + path + "' for writing");
  os.write(detail::kCheckpointMagic, 8);
  detail::put_u64_le(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (double v : w.values) detail::put_u64_le(os, std::bit_cast<std::uint64_t>(v));
  if (!os) throw Error("checkpoint: write failed for '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ParseError("checkpoint: cannot open '" + path + "'");
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, detail::kCheckpointMagic, 8) != 0)
    throw ParseError("checkpoint: bad magic in '" + path + "'");
  const std::uint64_t n = detail::get_u64_le(is);
  std::string text(n, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(n))) throw ParseError("checkpoint: truncated header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint: header is not JSON: ") + e.what());
  }
  Checkpoint ck;
  ck.config = config_from_json(header.at("config"));
  std::vector<Segment> segs;
  for (const auto& s : header.at("segments"))
    segs.push_back(Segment{s.at("name").get<std::string>(), s.at("offset").get<std::size_t>(),
                           s.at("rows").get<std::size_t>(), s.at("cols").get<std::size_t>()});
  ck.params.layout = Layout::from_segments(std::move(segs));
  if (!(ck.params.layout == Layout(ck.config)))
    throw ParseError("checkpoint: segment table does not match the model config");
  const auto count = header.at("count").get<std::size_t>();
  if (count != ck.params.layout.size()) throw ParseError("checkpoint: count does not match layout");
  ck.params.values.resize(count);
  for (auto& v : ck.params.values) v = std::bit_cast<double>(detail::get_u64_le(is));
  return ck;
}

}  // namespace suscept
