#include "concatlab/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

static_assert(std::endian::native == std::endian::little, "checkpoint writer assumes a little-endian host");

namespace concatlab {

namespace {
using nlohmann::ordered_json;

std::string blob_name(const std::string& base_path) {
  return std::filesystem::path(base_path + ".bin").filename().string();
}
}  // namespace

void save_checkpoint(const std::string& base_path, const NamedTensors& entries) {
  const std::string json_path = base_path + ".json";
  const std::string bin_path = base_path + ".bin";
  ordered_json manifest;
  manifest["format"] = "concatlab-checkpoint";
  manifest["version"] = 1;
  manifest["dtype"] = "float64";
  manifest["byte_order"] = "little";
  manifest["blob"] = blob_name(base_path);
  ordered_json list = ordered_json::array();
  std::uint64_t offset = 0;
  {
    std::ofstream bin(bin_path, std::ios::binary | std::ios::trunc);
    if (!bin) throw ContractError("cannot open '" + bin_path + "' for writing");
    for (const auto& [name, tensor] : entries) {
      ordered_json e;
      e["name"] = name;
      e["shape"] = tensor.shape();
      e["offset"] = offset;
      list.push_back(e);
      const std::size_t bytes = static_cast<std::size_t>(tensor.size()) * sizeof(double);
      bin.write(reinterpret_cast<const char*>(tensor.data()), static_cast<std::streamsize>(bytes));
      offset += bytes;
    }
    if (!bin) throw ContractError("failed writing blob '" + bin_path + "'");
  }
  manifest["entries"] = list;
  manifest["blob_bytes"] = offset;
  std::ofstream js(json_path, std::ios::trunc);
  if (!js) throw ContractError("cannot open '" + json_path + "' for writing");
  js << manifest.dump(2) << "\n";
  if (!js) throw ContractError("failed writing manifest '" + json_path + "'");
}

NamedTensors load_checkpoint(const std::string& base_path) {
  const std::string json_path = base_path + ".json";
  std::ifstream js(json_path);
  if (!js) throw ContractError("missing checkpoint manifest '" + json_path + "'");
  ordered_json manifest;
  try {
    js >> manifest;
  } catch (const std::exception& ex) {
    throw ContractError("invalid checkpoint manifest '" + json_path + "': " + ex.what());
  }
  if (manifest.value("format", "") != "concatlab-checkpoint") {
    throw ContractError("'" + json_path + "' is not a checkpoint manifest");
  }
  const std::string bin_path = (std::filesystem::path(base_path).parent_path() / manifest.value("blob", blob_name(base_path))).string();
  std::ifstream bin(bin_path, std::ios::binary);
  if (!bin) throw ContractError("missing checkpoint blob '" + bin_path + "'");
  std::vector<char> bytes((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
  const std::uint64_t expect = manifest.value("blob_bytes", std::uint64_t{0});
  if (bytes.size() != expect) {
    throw ContractError("checkpoint blob '" + bin_path + "' has " + std::to_string(bytes.size()) + " bytes, manifest expects " + std::to_string(expect));
  }
  NamedTensors out;
  for (const auto& e : manifest.at("entries")) {
    const std::string name = e.at("name").get<std::string>();
    Shape shape = e.at("shape").get<Shape>();
    const std::uint64_t offset = e.at("offset").get<std::uint64_t>();
    const std::int64_t count = shape_size(shape);
    const std::size_t nbytes = static_cast<std::size_t>(count) * sizeof(double);
    if (offset + nbytes > bytes.size()) {
      throw ContractError("checkpoint entry '" + name + "' overruns blob (offset " + std::to_string(offset) + ", " + std::to_string(nbytes) + " bytes)");
    }
    std::vector<double> data(static_cast<std::size_t>(count));
    std::memcpy(data.data(), bytes.data() + offset, nbytes);
    out.emplace_back(name, Tensor(std::move(shape), std::move(data)));
  }
  return out;
}

std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t named_tensors_digest(const NamedTensors& entries) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [name, tensor] : entries) {
    h = fnv1a64(name.data(), name.size(), h);
    for (auto d : tensor.shape()) h = fnv1a64(&d, sizeof(d), h);
    h = fnv1a64(tensor.data(), static_cast<std::size_t>(tensor.size()) * sizeof(double), h);
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex;
  for (int i = 15; i >= 0; --i) os << "0123456789abcdef"[(v >> (4 * i)) & 0xF];
  return os.str();
}

}  // namespace concatlab
