#include "ttlab/checkpoint.hpp"

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <unordered_map>

#include "json.hpp"

namespace ttlab::model {

namespace {

constexpr char kMagic[8] = {'T', 'T', 'C', 'K', 'P', 'T', '0', '1'};

nlohmann::json config_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers},   {"n_heads", c.n_heads},
          {"d_model", c.d_model},     {"d_ff", c.d_ff},
          {"ctx_len", c.ctx_len},     {"vocab_size", c.vocab_size},
          {"tie_embeddings", c.tie_embeddings}, {"init_std", c.init_std}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.ctx_len = j.at("ctx_len").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.tie_embeddings = j.at("tie_embeddings").get<bool>();
  c.init_std = j.at("init_std").get<double>();
  return c;
}

}  // namespace

void save_checkpoint(Parameters& params, const std::string& path) {
  auto named = params.named();
  nlohmann::json header;
  header["format"] = "ttlab-checkpoint";
  header["version"] = 1;
  header["model"] = config_json(params.cfg);
  uint64_t offset = 0;
  nlohmann::json manifest = nlohmann::json::array();
  for (auto& [name, t] : named) {
    uint64_t nbytes = static_cast<uint64_t>(t->numel()) * sizeof(float);
    manifest.push_back({{"name", name},
                        {"shape", t->shape()},
                        {"dtype", "f32"},
                        {"offset", offset},
                        {"nbytes", nbytes}});
    offset += nbytes;
  }
  header["tensors"] = manifest;
  std::string hs = header.dump();

  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("save_checkpoint: cannot open " + tmp);
    f.write(kMagic, sizeof kMagic);
    uint64_t hlen = hs.size();
    f.write(reinterpret_cast<const char*>(&hlen), sizeof hlen);
    f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (auto& [name, t] : named)
      f.write(reinterpret_cast<const char*>(t->data()),
              static_cast<std::streamsize>(t->numel() * static_cast<int64_t>(sizeof(float))));
    if (!f) throw std::runtime_error("save_checkpoint: write to " + tmp + " failed");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw std::runtime_error("save_checkpoint: rename to " + path + " failed");
}

Parameters load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[8];
  f.read(magic, sizeof magic);
  if (!f || std::memcmp(magic, kMagic, sizeof magic) != 0)
    throw std::runtime_error("load_checkpoint: " + path + " is not a checkpoint file");
  uint64_t hlen = 0;
  f.read(reinterpret_cast<char*>(&hlen), sizeof hlen);
  if (!f || hlen == 0 || hlen > (uint64_t{1} << 24))
    throw std::runtime_error("load_checkpoint: corrupt header length");
  std::string hs(hlen, '\0');
  f.read(hs.data(), static_cast<std::streamsize>(hlen));
  if (!f) throw std::runtime_error("load_checkpoint: truncated header");

  nlohmann::json header = nlohmann::json::parse(hs);
  if (header.value("format", "") != "ttlab-checkpoint" || header.value("version", 0) != 1)
    throw std::runtime_error("load_checkpoint: unsupported format/version in " + path);
  ModelConfig cfg = config_from_json(header.at("model"));
  cfg.validate();

  // Build an empty parameter set with the right shapes, then fill each tensor
  // from the manifest by name.
  Parameters p = init_parameters<float>(cfg, 0);
  auto named = p.named();
  std::unordered_map<std::string, TensorF*> by_name;
  for (auto& [name, t] : named) by_name[name] = t;

  uint64_t payload_base = sizeof kMagic + sizeof hlen + hlen;
  size_t filled = 0;
  for (const auto& e : header.at("tensors")) {
    std::string name = e.at("name").get<std::string>();
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw std::runtime_error("load_checkpoint: unexpected tensor \"" + name + "\"");
    TensorF* t = it->second;
    Shape shape = e.at("shape").get<Shape>();
    if (shape != t->shape())
      throw std::runtime_error("load_checkpoint: tensor \"" + name + "\" has shape " +
                               shape_str(shape) + ", expected " + shape_str(t->shape()));
    uint64_t nbytes = e.at("nbytes").get<uint64_t>();
    if (nbytes != static_cast<uint64_t>(t->numel()) * sizeof(float))
      throw std::runtime_error("load_checkpoint: tensor \"" + name + "\" has wrong byte count");
    f.seekg(static_cast<std::streamoff>(payload_base + e.at("offset").get<uint64_t>()));
    f.read(reinterpret_cast<char*>(t->data()), static_cast<std::streamsize>(nbytes));
    if (!f) throw std::runtime_error("load_checkpoint: truncated payload for \"" + name + "\"");
    ++filled;
  }
  if (filled != named.size())
    throw std::runtime_error("load_checkpoint: " + std::to_string(filled) + " of " +
                             std::to_string(named.size()) + " tensors present");
  return p;
}

}  // namespace ttlab::model
