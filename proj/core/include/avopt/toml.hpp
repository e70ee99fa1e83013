#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

// Minimal TOML reader covering the subset used by config files: tables,
// arrays of tables, dotted keys, strings, integers, floats, booleans,
// nested arrays, and inline tables. Every value remembers its path within
// the document so type errors and unknown-key reports name the exact field.

namespace avopt::toml {

struct Value {
  enum class Kind { Bool, Int, Float, String, Array, Table };

  Kind kind = Kind::Table;
  bool b = false;
  int64_t i = 0;
  double f = 0.0;
  std::string s;
  std::vector<Value> arr;
  std::vector<std::string> keys;  // table entries, insertion order
  std::vector<Value> vals;        // parallel to keys
  std::string path;               // dotted location in the document

  bool is_table() const { return kind == Kind::Table; }
  bool is_array() const { return kind == Kind::Array; }

  bool as_bool() const;
  int64_t as_int() const;
  double as_float() const;  // accepts Int or Float
  const std::string& as_string() const;
  const std::vector<Value>& as_array() const;
  std::vector<double> as_float_array() const;
  std::vector<int64_t> as_int_array() const;
  std::vector<std::string> as_string_array() const;

  const Value* find(std::string_view key) const;  // tables only, nullptr if absent
  const Value& at(std::string_view key) const;    // throws ValidationError if absent
};

Value parse(std::string_view text, std::string_view origin);
Value parse_file(const std::string& path);

// Tracks which keys of a table were consumed so finish() can reject
// misspelled or unsupported fields with their full path.
class Reader {
 public:
  explicit Reader(const Value& table);

  bool has(std::string_view key) const;
  const Value* opt(std::string_view key);  // marks key consumed
  const Value& req(std::string_view key);

  bool boolean(std::string_view key, bool fallback);
  int64_t integer(std::string_view key, int64_t fallback);
  double number(std::string_view key, double fallback);
  std::string str(std::string_view key, std::string fallback);

  int64_t integer(std::string_view key);
  double number(std::string_view key);
  std::string str(std::string_view key);

  const Value& table() const { return *t_; }
  void finish() const;  // throws ValidationError listing unknown keys

 private:
  const Value* t_;
  std::vector<bool> used_;
};

}  // namespace avopt::toml
