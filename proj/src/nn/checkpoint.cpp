#include "pfnf/nn/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "pfnf/error.hpp"

namespace pfnf::nn {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

template <typename U>
void write_pod(std::ostream& out, U value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(U));
}

template <typename U>
U read_pod(std::istream& in, const std::filesystem::path& path) {
  U value{};
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(U))) {
    throw IoError("truncated checkpoint header in " + path.string());
  }
  return value;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& metadata,
                     const ParameterSet<float>& params) {
  nlohmann::json meta = metadata;
  nlohmann::json listing = nlohmann::json::array();
  for (std::size_t i = 0; i < params.size(); ++i) {
    listing.push_back({{"name", params.name(i)}, {"shape", params[i].shape()}});
  }
  meta["parameters"] = listing;
  const std::string text = meta.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  write_pod<std::uint32_t>(out, kCheckpointVersion);
  write_pod<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : params.tensors()) {
    out.write(reinterpret_cast<const char*>(t.ptr()), static_cast<std::streamsize>(t.size() * sizeof(float)));
  }
  out.flush();
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kCheckpointMagic) {
    throw ParseError(path.string() + " is not a PFNF checkpoint");
  }
  const auto version = read_pod<std::uint32_t>(in, path);
  if (version != kCheckpointVersion) {
    throw ParseError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto meta_len = read_pod<std::uint64_t>(in, path);
  std::string text(meta_len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(meta_len))) {
    throw IoError("truncated checkpoint metadata in " + path.string());
  }
  Checkpoint ck;
  try {
    ck.metadata = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("bad checkpoint metadata: " + std::string(e.what()));
  }
  for (const auto& entry : ck.metadata.at("parameters")) {
    Shape shape = entry.at("shape").get<Shape>();
    Tensor<float> t(shape);
    if (!in.read(reinterpret_cast<char*>(t.ptr()), static_cast<std::streamsize>(t.size() * sizeof(float)))) {
      throw IoError("truncated parameter block '" + entry.at("name").get<std::string>() + "'");
    }
    ck.params.add(entry.at("name").get<std::string>(), std::move(t));
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw ParseError("trailing bytes after the last parameter block in " + path.string());
  }
  return ck;
}

}  // namespace pfnf::nn
