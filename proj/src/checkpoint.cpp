#include "fmq/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace fmq {

namespace {
void write_u64_le(std::ostream& os, uint64_t v) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(buf), 8);
}

uint64_t read_u64_le(std::istream& is) {
  unsigned char buf[8];
  is.read(reinterpret_cast<char*>(buf), 8);
  if (!is) throw IoError("truncated container header");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(buf[i]) << (8 * i);
  return v;
}
}  // namespace

void save_container(const std::string& path, const char magic[9],
                    const std::vector<NamedTensor>& tensors, const nlohmann::json& meta) {
  nlohmann::json header;
  header["meta"] = meta;
  auto& list = header["tensors"] = nlohmann::json::array();
  uint64_t offset = 0;
  for (const auto& t : tensors) {
    t.array->require_finite(t.name.c_str());
    nlohmann::json e;
    e["name"] = t.name;
    e["shape"] = t.array->shape;
    e["offset"] = offset;
    offset += sizeof(float) * static_cast<uint64_t>(t.array->size());
    list.push_back(std::move(e));
  }
  const std::string header_str = header.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open for writing: " + path);
  os.write(magic, 8);
  write_u64_le(os, header_str.size());
  os.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
  // Payload assumes a little-endian host.
  for (const auto& t : tensors)
    os.write(reinterpret_cast<const char*>(t.array->data.data()),
             static_cast<std::streamsize>(sizeof(float) * t.array->data.size()));
  if (!os) throw IoError("write failed: " + path);
}

Container load_container(const std::string& path, const char magic[9]) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  char got[8];
  is.read(got, 8);
  if (!is || std::memcmp(got, magic, 8) != 0) throw IoError("bad magic in " + path);
  const uint64_t header_len = read_u64_le(is);
  std::string header_str(header_len, '\0');
  is.read(header_str.data(), static_cast<std::streamsize>(header_len));
  if (!is) throw IoError("truncated header in " + path);
  nlohmann::json header = nlohmann::json::parse(header_str);

  Container out;
  out.meta = header.value("meta", nlohmann::json::object());
  const auto payload_start = is.tellg();
  for (const auto& e : header.at("tensors")) {
    DenseArray a;
    a.shape = e.at("shape").get<std::vector<int>>();
    a.data.resize(static_cast<size_t>(DenseArray::count(a.shape)));
    is.seekg(payload_start + static_cast<std::streamoff>(e.at("offset").get<uint64_t>()));
    is.read(reinterpret_cast<char*>(a.data.data()),
            static_cast<std::streamsize>(sizeof(float) * a.data.size()));
    if (!is) throw IoError("truncated payload in " + path);
    out.tensors.emplace(e.at("name").get<std::string>(), std::move(a));
  }
  return out;
}

}  // namespace fmq
