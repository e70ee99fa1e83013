#pragma once

#include <cstdint>
#include <string>
#include <vector>

// Binary container with a JSON header followed by raw little-endian blocks.
// Layout: magic (8 bytes, padded with spaces) | u64 header length | header
// JSON | concatenated blocks. The header records each block's name, dtype,
// shape, and byte offset relative to the start of the block region.

namespace avopt {

struct BlockSpec {
  std::string name;
  std::string dtype;  // "f8" or "f4"
  std::vector<int64_t> shape;
  size_t offset = 0;  // filled by the container
  size_t bytes = 0;
};

class ContainerWriter {
 public:
  ContainerWriter(std::string magic, int version);

  void add_f8(const std::string& name, std::vector<int64_t> shape, const double* data);
  void add_f4(const std::string& name, std::vector<int64_t> shape, const float* data);
  void set_meta(const std::string& json_text);  // extra header object, optional

  // Writes to a temp file in the target directory and renames into place.
  void write(const std::string& path) const;

 private:
  std::string magic_;
  int version_;
  std::string meta_;
  std::vector<BlockSpec> blocks_;
  std::vector<char> payload_;
};

class ContainerReader {
 public:
  ContainerReader(const std::string& path, const std::string& expected_magic);

  int version() const { return version_; }
  const std::string& meta() const { return meta_; }
  bool has(const std::string& name) const;
  const BlockSpec& spec(const std::string& name) const;
  std::vector<double> read_f8(const std::string& name) const;
  std::vector<float> read_f4(const std::string& name) const;

 private:
  std::string path_;
  int version_ = 0;
  std::string meta_;
  std::vector<BlockSpec> blocks_;
  std::vector<char> payload_;
};

// Writes bytes to path via a temp file + rename so readers never observe a
// partial file.
void atomic_write_file(const std::string& path, const std::string& bytes);

}  // namespace avopt
