#include "s3t/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace s3t {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'S', '3', 'T', '1'};
constexpr int kFormatVersion = 1;

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i)
    out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const std::string& s, std::size_t pos) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i)
    v |= static_cast<std::uint64_t>(
             static_cast<unsigned char>(s[pos + static_cast<std::size_t>(i)]))
         << (8 * i);
  return v;
}

}  // namespace

const Tensor<float>* CheckpointData::find(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

void write_checkpoint(const std::string& path, const CheckpointData& ck) {
  json manifest = json::array();
  std::string payload;
  for (const auto& [name, tensor] : ck.tensors) {
    json entry;
    entry["name"] = name;
    entry["shape"] = tensor.shape();
    entry["offset"] = payload.size();
    manifest.push_back(entry);
    for (Index i = 0; i < tensor.size(); ++i) {
      const std::uint32_t bits = std::bit_cast<std::uint32_t>(tensor[i]);
      for (int b = 0; b < 4; ++b)
        payload.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
    }
  }

  json header;
  header["format_version"] = kFormatVersion;
  header["config"] = model_config_to_json(ck.config);
  header["epoch"] = ck.epoch;
  header["opt_step"] = ck.opt_step;
  header["params"] = std::move(manifest);
  const std::string header_text = header.dump();

  std::string out;
  out.reserve(12 + header_text.size() + payload.size());
  out.append(kMagic, 4);
  put_u64(out, header_text.size());
  out += header_text;
  out += payload;

  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) fail<Error>("cannot write ", tmp);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) fail<Error>("short write to ", tmp);
  }
  std::filesystem::rename(tmp, path);
}

CheckpointData read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail<DataError>("cannot open ", path);
  std::string bytes((std::istreambuf_iterator<char>(f)),
                    std::istreambuf_iterator<char>());

  if (bytes.size() < 12)
    fail<DataError>(path, ": truncated at byte offset ", bytes.size(),
                    ", file too small for the magic and header length");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0)
    fail<DataError>(path, ": bad magic, not a checkpoint file");
  const std::uint64_t header_len = get_u64(bytes, 4);
  if (12 + header_len > bytes.size())
    fail<DataError>(path, ": truncated at byte offset ", bytes.size(),
                    ", header claims ", header_len, " bytes");

  const json header =
      parse_json_text(bytes.substr(12, header_len), path + " header");
  reject_unknown_keys(header, "header",
                      {"format_version", "config", "epoch", "opt_step",
                       "params"});
  if (!header.contains("format_version") ||
      header.at("format_version").get<int>() != kFormatVersion)
    fail<DataError>(path, ": unsupported checkpoint format version");

  CheckpointData ck;
  ck.config = model_config_from_json(header.at("config"), "header.config");
  ck.epoch = header.value("epoch", 0);
  ck.opt_step = header.value("opt_step", std::uint64_t{0});

  const std::size_t payload_start = 12 + header_len;
  const std::size_t payload_size = bytes.size() - payload_start;
  for (const json& entry : header.at("params")) {
    reject_unknown_keys(entry, "header.params[]", {"name", "shape", "offset"});
    const std::string name = entry.at("name").get<std::string>();
    const std::vector<Index> shape =
        entry.at("shape").get<std::vector<Index>>();
    const std::uint64_t offset = entry.at("offset").get<std::uint64_t>();
    Tensor<float> t(shape);
    const std::uint64_t need = offset + 4 * static_cast<std::uint64_t>(t.size());
    if (need > payload_size)
      fail<DataError>(path, ": truncated at byte offset ",
                      payload_start + payload_size, " while reading \"", name,
                      "\", which ends at ", payload_start + need);
    const char* src = bytes.data() + payload_start + offset;
    for (Index i = 0; i < t.size(); ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b)
        bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(
                    src[4 * i + b]))
                << (8 * b);
      t[i] = std::bit_cast<float>(bits);
    }
    ck.tensors.emplace_back(name, std::move(t));
  }
  return ck;
}

CheckpointData snapshot_model(Model<float>& model, Index epoch) {
  CheckpointData ck;
  ck.config = model.cfg;
  ck.epoch = epoch;
  for (const auto& view : model.params())
    ck.tensors.emplace_back(view.name, *view.value);
  for (const auto& view : model.buffers())
    ck.tensors.emplace_back(view.name, *view.value);
  return ck;
}

void restore_model(Model<float>& model, const CheckpointData& ck) {
  model.init(ck.config);
  auto assign = [&](const std::string& name, Tensor<float>* dst) {
    const Tensor<float>* src = ck.find(name);
    if (!src) fail<DataError>("checkpoint is missing tensor \"", name, "\"");
    if (src->shape() != dst->shape())
      fail<ShapeError>("checkpoint tensor \"", name, "\" has the wrong shape");
    *dst = *src;
  };
  for (auto& view : model.params()) assign(view.name, view.value);
  for (auto& view : model.buffers()) assign(view.name, view.value);
}

}  // namespace s3t
