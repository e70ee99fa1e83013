#include "avopt/toml.hpp"

#include <string>

#include "avopt/common.hpp"
#include "doctest.h"

using avopt::ValidationError;
namespace toml = avopt::toml;

TEST_SUITE("toml") {
  TEST_CASE("scalars, tables, and comments") {
    const std::string text = R"(# header comment
title = "hello world"
count = 42
ratio = 0.5
big = 1e3
neg = -7
flag = true
off = false   # trailing comment

[render]
width = 256
samples.per_box = 64
)";
    const toml::Value root = toml::parse(text, "test");
    CHECK(root.at("title").as_string() == "hello world");
    CHECK(root.at("count").as_int() == 42);
    CHECK(root.at("ratio").as_float() == doctest::Approx(0.5));
    CHECK(root.at("big").as_float() == doctest::Approx(1000.0));
    CHECK(root.at("neg").as_int() == -7);
    CHECK(root.at("flag").as_bool());
    CHECK_FALSE(root.at("off").as_bool());
    CHECK(root.at("render").at("width").as_int() == 256);
    CHECK(root.at("render").at("samples").at("per_box").as_int() == 64);
  }

  TEST_CASE("integers promote to float but not the reverse") {
    const toml::Value root = toml::parse("n = 3", "test");
    CHECK(root.at("n").as_float() == doctest::Approx(3.0));
    CHECK_THROWS_AS(toml::parse("x = 1.5", "t").at("x").as_int(), ValidationError);
  }

  TEST_CASE("arrays, nested arrays, multi-line arrays") {
    const std::string text = R"(
weights = [1.0, 0.1, 0.01]
dims = [16, 64, 64, 4]
rows = [[1, 2], [3, 4]]
multi = [
  "a",
  "b",  # comment inside
]
)";
    const toml::Value root = toml::parse(text, "test");
    CHECK(root.at("weights").as_float_array() == std::vector<double>{1.0, 0.1, 0.01});
    CHECK(root.at("dims").as_int_array() == std::vector<int64_t>{16, 64, 64, 4});
    CHECK(root.at("rows").as_array()[1].as_int_array() == std::vector<int64_t>{3, 4});
    CHECK(root.at("multi").as_string_array() == std::vector<std::string>{"a", "b"});
  }

  TEST_CASE("array of tables and inline tables") {
    const std::string text = R"(
[[person]]
seed = 1
beta = [0.5, -0.5]

[[person]]
seed = 2
pose = { theta = 0.1, trans = [0, 0, 1] }
)";
    const toml::Value root = toml::parse(text, "test");
    const auto& people = root.at("person").as_array();
    REQUIRE(people.size() == 2);
    CHECK(people[0].at("seed").as_int() == 1);
    CHECK(people[1].at("pose").at("theta").as_float() == doctest::Approx(0.1));
    CHECK(people[1].at("pose").at("trans").as_float_array() ==
          std::vector<double>{0.0, 0.0, 1.0});
  }

  TEST_CASE("string escapes and literal strings") {
    const toml::Value root =
        toml::parse("a = \"line\\nbreak\"\nb = 'raw\\n'\n", "test");
    CHECK(root.at("a").as_string() == "line\nbreak");
    CHECK(root.at("b").as_string() == "raw\\n");
  }

  TEST_CASE("parse errors carry file and line") {
    CHECK_THROWS_WITH_AS(toml::parse("x 1\n", "cfg.toml"),
                         "cfg.toml:1: expected '=' after key", ValidationError);
    CHECK_THROWS_AS(toml::parse("a = 1\na = 2\n", "t"), ValidationError);
    CHECK_THROWS_AS(toml::parse("s = \"open\n", "t"), ValidationError);
    CHECK_THROWS_AS(toml::parse("v = [1, 2\n", "t"), ValidationError);
    CHECK_THROWS_AS(toml::parse("v = @\n", "t"), ValidationError);
    CHECK_THROWS_AS(toml::parse("a = 1 b = 2\n", "t"), ValidationError);
  }

  TEST_CASE("type and missing-field errors name the full path") {
    const toml::Value root = toml::parse("[train]\nlr = 0.005\n", "test");
    CHECK_THROWS_WITH_AS(root.at("train").at("lr").as_string(),
                         "field 'train.lr' is not a string", ValidationError);
    CHECK_THROWS_WITH_AS(root.at("train").at("steps"), "missing field 'train.steps'",
                         ValidationError);
  }

  TEST_CASE("reader rejects unknown fields with their path") {
    const toml::Value root = toml::parse("[train]\nlr = 0.005\nlr_gird = 1.0\n", "test");
    toml::Reader r(root.at("train"));
    CHECK(r.number("lr", 0.0) == doctest::Approx(0.005));
    CHECK_THROWS_WITH_AS(r.finish(), "unknown field(s): 'train.lr_gird'", ValidationError);
  }

  TEST_CASE("reader defaults and required fields") {
    const toml::Value root = toml::parse("present = 5\n", "test");
    toml::Reader r(root);
    CHECK(r.integer("present", 0) == 5);
    CHECK(r.integer("absent", 9) == 9);
    CHECK(r.number("absent_f", 2.5) == doctest::Approx(2.5));
    CHECK(r.str("absent_s", "d") == "d");
    CHECK(r.boolean("absent_b", true));
    CHECK_THROWS_AS(r.number("needed"), ValidationError);
    CHECK_NOTHROW(r.finish());
  }
}
