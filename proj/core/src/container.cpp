#include "avopt/container.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "avopt/common.hpp"
#include "json.hpp"

static_assert(std::endian::native == std::endian::little,
              "container format assumes a little-endian host");

namespace avopt {

namespace {

using nlohmann::json;

size_t element_count(const std::vector<int64_t>& shape) {
  size_t n = 1;
  for (int64_t d : shape) {
    if (d < 0) throw ValidationError("negative dimension in block shape");
    n *= static_cast<size_t>(d);
  }
  return n;
}

std::string padded_magic(const std::string& magic) {
  if (magic.size() > 8) throw ValidationError("container magic longer than 8 bytes");
  std::string m = magic;
  m.resize(8, ' ');
  return m;
}

}  // namespace

void atomic_write_file(const std::string& path, const std::string& bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ValidationError("cannot open '" + tmp + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw ValidationError("short write to '" + tmp + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    std::remove(tmp.c_str());
    throw ValidationError("cannot move '" + tmp + "' into place");
  }
}

ContainerWriter::ContainerWriter(std::string magic, int version)
    : magic_(padded_magic(magic)), version_(version) {}

void ContainerWriter::add_f8(const std::string& name, std::vector<int64_t> shape,
                             const double* data) {
  BlockSpec b{name, "f8", std::move(shape), payload_.size(), 0};
  b.bytes = element_count(b.shape) * sizeof(double);
  payload_.resize(payload_.size() + b.bytes);
  std::memcpy(payload_.data() + b.offset, data, b.bytes);
  blocks_.push_back(std::move(b));
}

void ContainerWriter::add_f4(const std::string& name, std::vector<int64_t> shape,
                             const float* data) {
  BlockSpec b{name, "f4", std::move(shape), payload_.size(), 0};
  b.bytes = element_count(b.shape) * sizeof(float);
  payload_.resize(payload_.size() + b.bytes);
  std::memcpy(payload_.data() + b.offset, data, b.bytes);
  blocks_.push_back(std::move(b));
}

void ContainerWriter::set_meta(const std::string& json_text) { meta_ = json_text; }

void ContainerWriter::write(const std::string& path) const {
  json header;
  header["version"] = version_;
  header["endian"] = "little";
  if (!meta_.empty()) header["meta"] = json::parse(meta_);
  json blocks = json::array();
  for (const BlockSpec& b : blocks_) {
    json j;
    j["name"] = b.name;
    j["dtype"] = b.dtype;
    j["shape"] = b.shape;
    j["offset"] = b.offset;
    j["bytes"] = b.bytes;
    blocks.push_back(j);
  }
  header["blocks"] = blocks;
  const std::string htext = header.dump();

  std::string out;
  out.reserve(8 + 8 + htext.size() + payload_.size());
  out.append(magic_);
  uint64_t hlen = htext.size();
  out.append(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.append(htext);
  out.append(payload_.data(), payload_.size());
  atomic_write_file(path, out);
}

ContainerReader::ContainerReader(const std::string& path, const std::string& expected_magic)
    : path_(path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open '" + path + "'");
  char magic[8];
  in.read(magic, 8);
  if (!in || std::string(magic, 8) != padded_magic(expected_magic))
    throw ValidationError("'" + path + "' is not a " + expected_magic + " container");
  uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  if (!in || hlen > (1u << 26)) throw ValidationError("corrupt header in '" + path + "'");
  std::string htext(hlen, '\0');
  in.read(htext.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw ValidationError("corrupt header in '" + path + "'");

  json header;
  try {
    header = json::parse(htext);
    version_ = header.at("version").get<int>();
    if (header.contains("meta")) meta_ = header["meta"].dump();
    for (const json& j : header.at("blocks")) {
      BlockSpec b;
      b.name = j.at("name").get<std::string>();
      b.dtype = j.at("dtype").get<std::string>();
      b.shape = j.at("shape").get<std::vector<int64_t>>();
      b.offset = j.at("offset").get<size_t>();
      b.bytes = j.at("bytes").get<size_t>();
      blocks_.push_back(std::move(b));
    }
  } catch (const json::exception& e) {
    throw ValidationError("corrupt header in '" + path + "': " + e.what());
  }

  payload_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  for (const BlockSpec& b : blocks_) {
    if (b.offset + b.bytes > payload_.size())
      throw ValidationError("truncated block '" + b.name + "' in '" + path + "'");
    const size_t esize = b.dtype == "f8" ? 8 : (b.dtype == "f4" ? 4 : 0);
    if (esize == 0) throw ValidationError("unknown dtype for block '" + b.name + "'");
    if (element_count(b.shape) * esize != b.bytes)
      throw ValidationError("shape/bytes mismatch for block '" + b.name + "'");
  }
}

bool ContainerReader::has(const std::string& name) const {
  for (const BlockSpec& b : blocks_)
    if (b.name == name) return true;
  return false;
}

const BlockSpec& ContainerReader::spec(const std::string& name) const {
  for (const BlockSpec& b : blocks_)
    if (b.name == name) return b;
  throw ValidationError("missing block '" + name + "' in '" + path_ + "'");
}

std::vector<double> ContainerReader::read_f8(const std::string& name) const {
  const BlockSpec& b = spec(name);
  if (b.dtype != "f8") throw ValidationError("block '" + name + "' is not f8");
  std::vector<double> out(b.bytes / sizeof(double));
  std::memcpy(out.data(), payload_.data() + b.offset, b.bytes);
  return out;
}

std::vector<float> ContainerReader::read_f4(const std::string& name) const {
  const BlockSpec& b = spec(name);
  if (b.dtype != "f4") throw ValidationError("block '" + name + "' is not f4");
  std::vector<float> out(b.bytes / sizeof(float));
  std::memcpy(out.data(), payload_.data() + b.offset, b.bytes);
  return out;
}

}  // namespace avopt
