#include "par/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "json.hpp"

static_assert(std::endian::native == std::endian::little,
              "array container assumes a little-endian host");

namespace par::tensor {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

constexpr char kMagic[8] = {'P', 'A', 'R', 'B', 'I', 'N', '0', '1'};

void write_u64(std::ofstream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint64_t read_u64(std::ifstream& in, const std::string& path) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!in) throw ParseError("truncated array file '" + path + "'");
  return v;
}

}  // namespace

void save_arrays(const std::filesystem::path& path,
                 std::span<const NamedTensor> arrays,
                 std::string_view extra_json_object) {
  json extra;
  try {
    extra = json::parse(extra_json_object);
  } catch (const json::parse_error& e) {
    throw ContractViolation(std::string("save_arrays: extra is not JSON: ") +
                            e.what());
  }
  if (!extra.is_object()) {
    throw ContractViolation("save_arrays: extra must be a JSON object");
  }

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write array file '" + path.string() + "'");
  out.write(kMagic, sizeof(kMagic));
  write_u64(out, arrays.size());

  ordered_json manifest_arrays = ordered_json::array();
  std::uint64_t offset = sizeof(kMagic) + sizeof(std::uint64_t);
  for (const NamedTensor& named : arrays) {
    const Tensor& t = *named.tensor;
    write_u64(out, named.name.size());
    out.write(named.name.data(),
              static_cast<std::streamsize>(named.name.size()));
    write_u64(out, t.shape.size());
    for (std::size_t d : t.shape) write_u64(out, d);
    out.write(reinterpret_cast<const char*>(t.values.data()),
              static_cast<std::streamsize>(t.values.size() * sizeof(double)));

    offset += sizeof(std::uint64_t) + named.name.size() +
              sizeof(std::uint64_t) * (1 + t.shape.size());
    ordered_json entry;
    entry["name"] = named.name;
    entry["shape"] = t.shape;
    entry["offset"] = offset;
    manifest_arrays.push_back(std::move(entry));
    offset += t.values.size() * sizeof(double);
  }
  if (!out) throw IoError("write failed for '" + path.string() + "'");
  out.close();

  ordered_json manifest;
  manifest["format"] = "par-arrays-v1";
  manifest["arrays"] = std::move(manifest_arrays);
  manifest["extra"] = extra;

  const std::filesystem::path manifest_path = path.string() + ".json";
  std::ofstream mout(manifest_path, std::ios::binary);
  if (!mout) {
    throw IoError("cannot write manifest '" + manifest_path.string() + "'");
  }
  mout << manifest.dump(2) << '\n';
  if (!mout) throw IoError("write failed for '" + manifest_path.string() + "'");
}

ArrayBundle load_arrays(const std::filesystem::path& path) {
  const std::string path_str = path.string();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open array file '" + path_str + "'");

  char magic[sizeof(kMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw ParseError("'" + path_str + "' is not a par array file");
  }

  ArrayBundle bundle;
  const std::uint64_t count = read_u64(in, path_str);
  for (std::uint64_t a = 0; a < count; ++a) {
    const std::uint64_t name_len = read_u64(in, path_str);
    std::string name(name_len, '\0');
    in.read(name.data(), static_cast<std::streamsize>(name_len));
    const std::uint64_t ndim = read_u64(in, path_str);
    Shape shape(ndim);
    for (std::uint64_t d = 0; d < ndim; ++d) {
      shape[d] = static_cast<std::size_t>(read_u64(in, path_str));
    }
    Tensor t = Tensor::zeros(shape);
    in.read(reinterpret_cast<char*>(t.values.data()),
            static_cast<std::streamsize>(t.values.size() * sizeof(double)));
    if (!in) throw ParseError("truncated array file '" + path_str + "'");
    bundle.arrays.emplace_back(std::move(name), std::move(t));
  }

  const std::filesystem::path manifest_path = path_str + ".json";
  std::ifstream min(manifest_path, std::ios::binary);
  if (!min) {
    throw IoError("missing manifest '" + manifest_path.string() + "'");
  }
  json manifest;
  try {
    min >> manifest;
  } catch (const json::parse_error& e) {
    throw ParseError("invalid manifest '" + manifest_path.string() + "': " +
                     e.what());
  }
  if (!manifest.is_object() || manifest.value("format", "") != "par-arrays-v1") {
    throw ParseError("unsupported manifest format in '" +
                     manifest_path.string() + "'");
  }
  const json& entries = manifest.at("arrays");
  if (!entries.is_array() || entries.size() != bundle.arrays.size()) {
    throw ValidationError("manifest does not match array file '" + path_str + "'");
  }
  for (std::size_t i = 0; i < bundle.arrays.size(); ++i) {
    const json& entry = entries[static_cast<int>(i)];
    if (entry.at("name").get<std::string>() != bundle.arrays[i].first ||
        entry.at("shape").get<Shape>() != bundle.arrays[i].second.shape) {
      throw ValidationError("manifest entry mismatch for array '" +
                            bundle.arrays[i].first + "'");
    }
  }
  bundle.extra_json = manifest.value("extra", json::object()).dump();
  return bundle;
}

const Tensor* ArrayBundle::find(std::string_view name) const {
  for (const auto& [n, t] : arrays) {
    if (n == name) return &t;
  }
  return nullptr;
}

}  // namespace par::tensor
