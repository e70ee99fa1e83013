#include "avopt/toml.hpp"

#include <cctype>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "avopt/common.hpp"

namespace avopt::toml {

namespace {

using Kind = Value::Kind;

[[noreturn]] void type_err(const Value& v, const char* want) {
  throw ValidationError("field '" + (v.path.empty() ? std::string("<root>") : v.path) +
                        "' is not " + want);
}

std::string join_path(const std::string& base, std::string_view key) {
  return base.empty() ? std::string(key) : base + "." + std::string(key);
}

struct Parser {
  std::string_view text;
  std::string origin;
  size_t pos = 0;
  int line = 1;

  bool eof() const { return pos >= text.size(); }
  char peek() const { return text[pos]; }
  char get() {
    char c = text[pos++];
    if (c == '\n') ++line;
    return c;
  }

  [[noreturn]] void err(const std::string& msg) const {
    std::ostringstream os;
    os << origin << ":" << line << ": " << msg;
    throw ValidationError(os.str());
  }

  void skip_inline_ws() {
    while (!eof() && (peek() == ' ' || peek() == '\t' || peek() == '\r')) ++pos;
  }

  // Whitespace, comments, and (optionally) newlines.
  void skip_ws(bool newlines) {
    while (!eof()) {
      char c = peek();
      if (c == ' ' || c == '\t' || c == '\r') {
        ++pos;
      } else if (c == '#') {
        while (!eof() && peek() != '\n') ++pos;
      } else if (c == '\n' && newlines) {
        get();
      } else {
        break;
      }
    }
  }

  static bool is_bare(char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-';
  }

  std::string string_value() {
    const char q = get();
    std::string out;
    if (q == '\'') {
      while (!eof() && peek() != '\'') {
        if (peek() == '\n') err("unterminated string");
        out.push_back(get());
      }
      if (eof()) err("unterminated string");
      get();
      return out;
    }
    while (!eof() && peek() != '"') {
      char c = get();
      if (c == '\n') err("unterminated string");
      if (c == '\\') {
        if (eof()) err("unterminated string");
        switch (get()) {
          case 'n': out.push_back('\n'); break;
          case 't': out.push_back('\t'); break;
          case 'r': out.push_back('\r'); break;
          case '"': out.push_back('"'); break;
          case '\'': out.push_back('\''); break;
          case '\\': out.push_back('\\'); break;
          default: err("unsupported string escape");
        }
      } else {
        out.push_back(c);
      }
    }
    if (eof()) err("unterminated string");
    get();
    return out;
  }

  std::string key_part() {
    skip_inline_ws();
    if (!eof() && (peek() == '"' || peek() == '\'')) return string_value();
    std::string k;
    while (!eof() && is_bare(peek())) k.push_back(get());
    if (k.empty()) err("expected key");
    return k;
  }

  std::vector<std::string> dotted_key() {
    std::vector<std::string> parts{key_part()};
    skip_inline_ws();
    while (!eof() && peek() == '.') {
      get();
      parts.push_back(key_part());
      skip_inline_ws();
    }
    return parts;
  }

  Value scalar_from_token(const std::string& tok, const std::string& path) {
    Value v;
    v.path = path;
    if (tok == "true" || tok == "false") {
      v.kind = Kind::Bool;
      v.b = (tok == "true");
      return v;
    }
    std::string digits;
    bool is_float = false;
    for (char c : tok) {
      if (c == '_') continue;
      if (c == '.' || c == 'e' || c == 'E') is_float = true;
      digits.push_back(c);
    }
    if (digits.find("inf") != std::string::npos || digits.find("nan") != std::string::npos)
      is_float = true;
    const char* begin = digits.c_str();
    char* end = nullptr;
    if (!is_float) {
      errno = 0;
      const long long n = std::strtoll(begin, &end, 10);
      if (end == begin + digits.size() && errno == 0) {
        v.kind = Kind::Int;
        v.i = n;
        return v;
      }
    }
    errno = 0;
    const double d = std::strtod(begin, &end);
    if (end != begin + digits.size() || digits.empty()) err("invalid value '" + tok + "'");
    v.kind = Kind::Float;
    v.f = d;
    return v;
  }

  Value value(const std::string& path) {
    skip_inline_ws();
    if (eof()) err("expected value");
    const char c = peek();
    Value v;
    v.path = path;
    if (c == '"' || c == '\'') {
      v.kind = Kind::String;
      v.s = string_value();
      return v;
    }
    if (c == '[') {
      get();
      v.kind = Kind::Array;
      skip_ws(true);
      int idx = 0;
      while (!eof() && peek() != ']') {
        v.arr.push_back(value(path + "[" + std::to_string(idx++) + "]"));
        skip_ws(true);
        if (!eof() && peek() == ',') {
          get();
          skip_ws(true);
        } else {
          break;
        }
      }
      if (eof() || peek() != ']') err("unterminated array");
      get();
      return v;
    }
    if (c == '{') {
      get();
      v.kind = Kind::Table;
      skip_inline_ws();
      if (!eof() && peek() == '}') {
        get();
        return v;
      }
      while (true) {
        const std::string k = key_part();
        skip_inline_ws();
        if (eof() || peek() != '=') err("expected '=' in inline table");
        get();
        for (const auto& existing : v.keys)
          if (existing == k) err("duplicate key '" + join_path(path, k) + "'");
        Value child = value(join_path(path, k));
        v.keys.push_back(k);
        v.vals.push_back(std::move(child));
        skip_inline_ws();
        if (!eof() && peek() == ',') {
          get();
          skip_inline_ws();
          continue;
        }
        break;
      }
      if (eof() || peek() != '}') err("unterminated inline table");
      get();
      return v;
    }
    std::string tok;
    while (!eof() && (is_bare(peek()) || peek() == '+' || peek() == '.')) tok.push_back(get());
    if (tok.empty()) err("expected value");
    return scalar_from_token(tok, path);
  }

  int find_key(const Value& table, const std::string& key) const {
    for (size_t j = 0; j < table.keys.size(); ++j)
      if (table.keys[j] == key) return static_cast<int>(j);
    return -1;
  }

  // Resolve a [header] or [[header]] path from the root, creating tables
  // (or appending an array-of-tables element) as needed.
  Value* navigate(Value& root, const std::vector<std::string>& parts, bool array_of_tables) {
    Value* cur = &root;
    for (size_t k = 0; k < parts.size(); ++k) {
      const bool last = (k + 1 == parts.size());
      const std::string child_path = join_path(cur->path, parts[k]);
      int idx = find_key(*cur, parts[k]);
      if (idx < 0) {
        Value nv;
        nv.path = child_path;
        nv.kind = (last && array_of_tables) ? Kind::Array : Kind::Table;
        cur->keys.push_back(parts[k]);
        cur->vals.push_back(std::move(nv));
        idx = static_cast<int>(cur->keys.size()) - 1;
      }
      Value* child = &cur->vals[idx];
      if (last && array_of_tables) {
        if (!child->is_array()) err("'" + child_path + "' is not an array of tables");
        Value elem;
        elem.kind = Kind::Table;
        elem.path = child_path + "[" + std::to_string(child->arr.size()) + "]";
        child->arr.push_back(std::move(elem));
        return &child->arr.back();
      }
      if (child->is_array()) {
        if (child->arr.empty() || !child->arr.back().is_table())
          err("'" + child_path + "' is not a table");
        child = &child->arr.back();
      } else if (!child->is_table()) {
        err("'" + child_path + "' is not a table");
      }
      cur = child;
    }
    return cur;
  }

  void insert_value(Value& table, const std::vector<std::string>& parts, size_t k) {
    const std::string child_path = join_path(table.path, parts[k]);
    const int idx = find_key(table, parts[k]);
    if (k + 1 == parts.size()) {
      if (idx >= 0) err("duplicate key '" + child_path + "'");
      Value v = value(child_path);
      table.keys.push_back(parts[k]);
      table.vals.push_back(std::move(v));
      return;
    }
    Value* child;
    if (idx < 0) {
      Value nv;
      nv.kind = Kind::Table;
      nv.path = child_path;
      table.keys.push_back(parts[k]);
      table.vals.push_back(std::move(nv));
      child = &table.vals.back();
    } else {
      child = &table.vals[idx];
      if (!child->is_table()) err("'" + child_path + "' is not a table");
    }
    insert_value(*child, parts, k + 1);
  }
};

}  // namespace

Value parse(std::string_view text, std::string_view origin) {
  Parser p;
  p.text = text;
  p.origin = std::string(origin);
  Value root;
  root.kind = Kind::Table;
  Value* current = &root;
  p.skip_ws(true);
  while (!p.eof()) {
    if (p.peek() == '[') {
      p.get();
      const bool array_of_tables = !p.eof() && p.peek() == '[';
      if (array_of_tables) p.get();
      const auto parts = p.dotted_key();
      p.skip_inline_ws();
      if (p.eof() || p.peek() != ']') p.err("expected ']' in table header");
      p.get();
      if (array_of_tables) {
        if (p.eof() || p.peek() != ']') p.err("expected ']]' in table header");
        p.get();
      }
      current = p.navigate(root, parts, array_of_tables);
    } else {
      const auto parts = p.dotted_key();
      p.skip_inline_ws();
      if (p.eof() || p.peek() != '=') p.err("expected '=' after key");
      p.get();
      p.insert_value(*current, parts, 0);
    }
    p.skip_inline_ws();
    if (!p.eof() && p.peek() == '#')
      while (!p.eof() && p.peek() != '\n') ++p.pos;
    if (!p.eof() && p.peek() != '\n') p.err("unexpected trailing content");
    p.skip_ws(true);
  }
  return root;
}

Value parse_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open config file '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();
  return parse(text, path);
}

bool Value::as_bool() const {
  if (kind != Kind::Bool) type_err(*this, "a boolean");
  return b;
}

int64_t Value::as_int() const {
  if (kind != Kind::Int) type_err(*this, "an integer");
  return i;
}

double Value::as_float() const {
  if (kind == Kind::Int) return static_cast<double>(i);
  if (kind != Kind::Float) type_err(*this, "a number");
  return f;
}

const std::string& Value::as_string() const {
  if (kind != Kind::String) type_err(*this, "a string");
  return s;
}

const std::vector<Value>& Value::as_array() const {
  if (kind != Kind::Array) type_err(*this, "an array");
  return arr;
}

std::vector<double> Value::as_float_array() const {
  std::vector<double> out;
  out.reserve(as_array().size());
  for (const Value& v : arr) out.push_back(v.as_float());
  return out;
}

std::vector<int64_t> Value::as_int_array() const {
  std::vector<int64_t> out;
  out.reserve(as_array().size());
  for (const Value& v : arr) out.push_back(v.as_int());
  return out;
}

std::vector<std::string> Value::as_string_array() const {
  std::vector<std::string> out;
  out.reserve(as_array().size());
  for (const Value& v : arr) out.push_back(v.as_string());
  return out;
}

const Value* Value::find(std::string_view key) const {
  if (!is_table()) type_err(*this, "a table");
  for (size_t j = 0; j < keys.size(); ++j)
    if (keys[j] == key) return &vals[j];
  return nullptr;
}

const Value& Value::at(std::string_view key) const {
  const Value* v = find(key);
  if (!v) throw ValidationError("missing field '" + join_path(path, key) + "'");
  return *v;
}

Reader::Reader(const Value& table) : t_(&table), used_(table.keys.size(), false) {
  if (!table.is_table()) type_err(table, "a table");
}

bool Reader::has(std::string_view key) const {
  for (const auto& k : t_->keys)
    if (k == key) return true;
  return false;
}

const Value* Reader::opt(std::string_view key) {
  for (size_t j = 0; j < t_->keys.size(); ++j) {
    if (t_->keys[j] == key) {
      used_[j] = true;
      return &t_->vals[j];
    }
  }
  return nullptr;
}

const Value& Reader::req(std::string_view key) {
  const Value* v = opt(key);
  if (!v) throw ValidationError("missing field '" + join_path(t_->path, key) + "'");
  return *v;
}

bool Reader::boolean(std::string_view key, bool fallback) {
  const Value* v = opt(key);
  return v ? v->as_bool() : fallback;
}

int64_t Reader::integer(std::string_view key, int64_t fallback) {
  const Value* v = opt(key);
  return v ? v->as_int() : fallback;
}

double Reader::number(std::string_view key, double fallback) {
  const Value* v = opt(key);
  return v ? v->as_float() : fallback;
}

std::string Reader::str(std::string_view key, std::string fallback) {
  const Value* v = opt(key);
  return v ? v->as_string() : fallback;
}

int64_t Reader::integer(std::string_view key) { return req(key).as_int(); }
double Reader::number(std::string_view key) { return req(key).as_float(); }
std::string Reader::str(std::string_view key) { return req(key).as_string(); }

void Reader::finish() const {
  std::string unknown;
  for (size_t j = 0; j < t_->keys.size(); ++j) {
    if (!used_[j]) {
      if (!unknown.empty()) unknown += ", ";
      unknown += "'" + join_path(t_->path, t_->keys[j]) + "'";
    }
  }
  if (!unknown.empty()) throw ValidationError("unknown field(s): " + unknown);
}

}  // namespace avopt::toml
