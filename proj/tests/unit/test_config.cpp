#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "otpr/config.hpp"
#include "otpr/error.hpp"

using namespace otpr;
using namespace otpr::config;

TEST_CASE("defaults are valid and round-trip through text") {
  const RunConfig d;
  CHECK_NOTHROW(d.validate());
  CHECK(d.dual_lambda == 1e-5);
  CHECK(d.pretrain_lr == 1e-5);
  CHECK(d.finetune_proposals == 8);

  RunConfig c;
  c.seed = 17;
  c.env_name = "multigoal_pointmass";
  c.model_hidden = {32, 16, 8};
  c.dual_lr_final = 1e-7;
  c.finetune_masked = false;
  c.dual_lambda = 0.0123456789012345;
  c.out_dir = "runs/with space";
  const RunConfig back = parse_config(to_text(c));
  CHECK(to_text(back) == to_text(c));
  CHECK(back.seed == 17);
  CHECK(back.model_hidden == std::vector<int>{32, 16, 8});
  REQUIRE(back.dual_lr_final.has_value());
  CHECK(*back.dual_lr_final == 1e-7);
  CHECK(back.dual_lambda == c.dual_lambda);
  CHECK(back.out_dir == "runs/with space");
}

TEST_CASE("text parsing") {
  const RunConfig c = parse_config(
      "# comment\n"
      "seed = 3   # trailing\n"
      "\n"
      "finetune.guidance = Q\n"
      "finetune.masked = false\n"
      "dual.hidden = 8, 8\n"
      "dual.lr_final = none\n");
  CHECK(c.seed == 3);
  CHECK(c.finetune_guidance == "Q");
  CHECK_FALSE(c.finetune_masked);
  CHECK(c.dual_hidden == std::vector<int>{8, 8});
  CHECK_FALSE(c.dual_lr_final.has_value());
}

TEST_CASE("bad input is rejected") {
  CHECK_THROWS_AS(parse_config("finetune.guidanse = H\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("seed = -1\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("dual.lambda = abc\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("finetune.masked = maybe\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("no equals sign\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("model.hidden = 4,x\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("dual.lambda = 0\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("finetune.guidance = Z\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("finetune.score_loss = mse\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("env.name = cartpole\n"), ConfigError);
  CHECK_THROWS_AS(load_config("/nonexistent/otpr.cfg"), IoError);
}

TEST_CASE("every key appears in the canonical text") {
  RunConfig c;
  const std::string text = to_text(c);
  for (const Field& f : fields(c)) CHECK(text.find(f.key + " = ") != std::string::npos);
}

TEST_CASE("shipped configs load") {
  const std::filesystem::path dir = OTPR_SOURCE_DIR "/configs";
  int n = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.path().extension() != ".cfg") continue;
    CAPTURE(e.path().string());
    CHECK_NOTHROW(load_config(e.path()));
    ++n;
  }
  CHECK(n >= 1);
}
