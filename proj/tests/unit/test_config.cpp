#include "support.hpp"
#include "wmr/config.hpp"
#include "wmr/errors.hpp"
#include "wmr/trainer.hpp"

#include <gtest/gtest.h>

#include <fstream>

using namespace wmr;
using nlohmann::json;

namespace {

json defaults() {
  return {{"model", {{"channels", 32}, {"use_wcc", true}, {"kind", "gfm"}}},
          {"train", {{"learning_rate", 1e-4}, {"seed", 0u}, {"max_steps", 0}}}};
}

}  // namespace

TEST(Config, FlattenUsesDottedPaths) {
  auto flat = config::flatten(defaults());
  ASSERT_EQ(flat.size(), 6u);
  EXPECT_EQ(flat[0].first, "model.channels");
  EXPECT_EQ(flat[0].second, 32);
}

TEST(Config, MergeOverridesKnownKeysOnly) {
  auto m = config::merge(defaults(), {{"model", {{"channels", 16}}}, {"train", {{"learning_rate", 1}}}});
  EXPECT_EQ(m["model"]["channels"], 16);
  EXPECT_EQ(m["model"]["use_wcc"], true);
  EXPECT_EQ(m["train"]["learning_rate"], 1);
  EXPECT_THROW(config::merge(defaults(), {{"model", {{"chanels", 16}}}}), InputError);
  EXPECT_THROW(config::merge(defaults(), {{"model", {{"channels", "x"}}}}), InputError);
  EXPECT_THROW(config::merge(defaults(), {{"model", {{"channels", 1.5}}}}), InputError);
  EXPECT_THROW(config::merge(defaults(), {{"model", 3}}), InputError);
}

TEST(Config, SetDottedInfersTypeFromDefault) {
  auto j = defaults();
  config::set_dotted(j, "model.channels", "64");
  config::set_dotted(j, "model.use_wcc", "false");
  config::set_dotted(j, "model.kind", "conv");
  config::set_dotted(j, "train.learning_rate", "3e-4");
  config::set_dotted(j, "train.seed", "42");
  EXPECT_EQ(j["model"]["channels"], 64);
  EXPECT_EQ(j["model"]["use_wcc"], false);
  EXPECT_EQ(j["model"]["kind"], "conv");
  EXPECT_DOUBLE_EQ(j["train"]["learning_rate"].get<double>(), 3e-4);
  EXPECT_EQ(j["train"]["seed"], 42u);
  EXPECT_THROW(config::set_dotted(j, "model.channels", "6.5"), InputError);
  EXPECT_THROW(config::set_dotted(j, "model.use_wcc", "maybe"), InputError);
  EXPECT_THROW(config::set_dotted(j, "train.seed", "-1"), InputError);
  EXPECT_THROW(config::set_dotted(j, "model", "1"), InputError);
  EXPECT_THROW(config::set_dotted(j, "model.nope", "1"), InputError);
}

TEST(Config, ParseOverride) {
  EXPECT_EQ(config::parse_override("a.b=c=d"), (std::pair<std::string, std::string>{"a.b", "c=d"}));
  EXPECT_THROW(config::parse_override("novalue"), InputError);
  EXPECT_THROW(config::parse_override("=x"), InputError);
}

TEST(Config, ResolveLayersFileThenOverrides) {
  test::TempDir dir;
  std::ofstream(dir / "c.json") << R"({"model": {"channels": 8}, "train": {"max_steps": 5}})";
  auto r = config::resolve(defaults(), dir / "c.json", {"train.max_steps=7"});
  EXPECT_EQ(r["model"]["channels"], 8);
  EXPECT_EQ(r["train"]["max_steps"], 7);
  EXPECT_THROW(config::resolve(defaults(), dir / "missing.json", {}), InputError);
  std::ofstream(dir / "bad.json") << "{not json";
  EXPECT_THROW(config::resolve(defaults(), dir / "bad.json", {}), InputError);

  config::persist(dir / "sub" / "eff.json", r);
  EXPECT_EQ(config::read_file(dir / "sub" / "eff.json"), r);
}

TEST(Config, DescribeKeysListsEveryLeaf) {
  const auto text = config::describe_keys(defaults());
  EXPECT_NE(text.find("model.channels (int, default 32)"), std::string::npos);
  EXPECT_NE(text.find("model.use_wcc (bool, default true)"), std::string::npos);
  EXPECT_NE(text.find("train.learning_rate (float"), std::string::npos);
}

TEST(Config, TrainConfigRoundTripsThroughGenericLayer) {
  auto cfg = trainer::TrainConfig::preset("desk");
  auto j = cfg.to_json();
  config::set_dotted(j, "train.batch_size", "2");
  config::set_dotted(j, "loss.reduction", "sum");
  auto back = trainer::TrainConfig::from_json(j);
  EXPECT_EQ(back.batch_size, 2);
  EXPECT_EQ(back.loss.reduction, losses::Reduction::sum);
  EXPECT_EQ(config::flatten(back.to_json()).size(), config::flatten(cfg.to_json()).size());
}
