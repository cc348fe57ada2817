#include <catch2/catch_amalgamated.hpp>

#include "founddiff/config.hpp"

using namespace founddiff;
using namespace founddiff::cli;

TEST_CASE("config round-trip is the identity") {
  RunConfig defaults;
  auto text = serialize_config(defaults);
  auto parsed = parse_config_text(text);
  REQUIRE(parsed == defaults);

  RunConfig custom;
  custom.families = {"head"};
  custom.dose_fractions = {1.0 / 3, 1.0 / 7};
  custom.widths = {4, 8, 12};
  custom.n0 = 54321.5;
  custom.seed = 987654321012345ull;
  custom.stochastic_init = true;
  custom.dataset_dir = "/tmp/somewhere";
  auto text2 = serialize_config(custom);
  REQUIRE(parse_config_text(text2) == custom);
  REQUIRE(serialize_config(parse_config_text(text2)) == text2);
}

TEST_CASE("fraction syntax and comments parse") {
  auto c = parse_config_text(
      "# a comment\n"
      "dose_fractions = 1/2, 1/20  # inline comment\n"
      "eta = 0.35\n"
      "\n");
  REQUIRE(c.dose_fractions == std::vector<double>{0.5, 0.05});
  REQUIRE(c.eta == 0.35);
}

TEST_CASE("unknown keys are rejected by name") {
  REQUIRE_THROWS_WITH(parse_config_text("not_a_key = 1\n"),
                      Catch::Matchers::ContainsSubstring("not_a_key"));
}

TEST_CASE("validation names the offending key") {
  REQUIRE_THROWS_WITH(parse_config_text("dose_fractions = 0,1/2\n"),
                      Catch::Matchers::ContainsSubstring("dose_fractions"));
  REQUIRE_THROWS_WITH(parse_config_text("image_size = 4\n"),
                      Catch::Matchers::ContainsSubstring("image_size"));
  REQUIRE_THROWS_WITH(parse_config_text("widths = 16,32\n"),
                      Catch::Matchers::ContainsSubstring("widths"));
  REQUIRE_THROWS_WITH(parse_config_text("families = torso\n"),
                      Catch::Matchers::ContainsSubstring("torso"));
  REQUIRE_THROWS_WITH(parse_config_text("sample_steps = 9999\n"),
                      Catch::Matchers::ContainsSubstring("sample_steps"));
  REQUIRE_THROWS_WITH(parse_config_text("n_per_cell = zebra\n"),
                      Catch::Matchers::ContainsSubstring("n_per_cell"));
}
