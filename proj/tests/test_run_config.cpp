#include "doctest_torch.hpp"

#include <fstream>

#include "emorl/errors.hpp"
#include "emorl/run_config.hpp"
#include "test_util.hpp"

using namespace emorl;
using nlohmann::json;

TEST_SUITE("cli") {

TEST_CASE("built-in presets parse to the trainer presets") {
    for (const std::string name : {"tetromino", "sprites"}) {
        const auto rc = parse_run_config(preset_document(name));
        const auto expected = name == "tetromino" ? tetromino_train_preset() : sprites_train_preset();
        CHECK(canonical_string(rc.train) == canonical_string(expected));
        CHECK(rc.train.total_steps == expected.total_steps);
        CHECK(rc.data.preset.name == name);
        CHECK(rc.data.n_train + rc.data.n_test <= rc.data.count);
        CHECK(rc.data.n_test == 320);
    }
    CHECK_THROWS_AS(preset_document("clevr"), ConfigError);
}

TEST_CASE("overrides parse JSON values and fall back to strings") {
    json doc = preset_document("tetromino");
    apply_override(doc, "model.slots=7");
    apply_override(doc, "train.geco=false");
    apply_override(doc, "train.lr.base=1e-3");
    apply_override(doc, "train.curriculum=[[0,3],[10,1]]");
    apply_override(doc, "out=some/dir");
    const auto rc = parse_run_config(doc);
    CHECK(rc.train.model.slots == 7);
    CHECK_FALSE(rc.train.geco);
    CHECK(rc.train.lr.base == doctest::Approx(1e-3));
    CHECK((rc.train.curriculum == std::vector<CurriculumEntry>{{0, 3}, {10, 1}}));
    CHECK(rc.out == std::filesystem::path("./some/dir"));
    CHECK_THROWS_AS(apply_override(doc, "novalue"), ConfigError);
    CHECK_THROWS_AS(apply_override(doc, "=3"), ConfigError);
}

TEST_CASE("unknown keys and bad values are rejected") {
    json doc = preset_document("sprites");
    doc["model"]["slotz"] = 3;
    CHECK_THROWS_AS(parse_run_config(doc), ConfigError);
    doc = preset_document("sprites");
    doc["extra"] = 1;
    CHECK_THROWS_AS(parse_run_config(doc), ConfigError);
    doc = preset_document("sprites");
    doc["model"]["slots"] = "many";
    CHECK_THROWS_AS(parse_run_config(doc), ConfigError);
    doc = preset_document("sprites");
    doc["train"]["curriculum"] = json::array({json::array({0, 1}), json::array({5, 3})});
    CHECK_THROWS_AS(parse_run_config(doc), ConfigError);
    doc = preset_document("sprites");
    doc["model"]["decoder"] = "huge";
    CHECK_THROWS_AS(parse_run_config(doc), ConfigError);
}

TEST_CASE("preset inheritance merges files over their base") {
    test::TempDir dir;
    {
        std::ofstream(dir.path / "base.json") << R"({"preset": "tetromino", "model": {"slots": 6}, "log_every": 7})";
        std::ofstream(dir.path / "child.json") << R"({"preset": "base.json", "log_every": 9, "data": {"max_objects": 4}})";
    }
    const auto doc = load_config_document(dir.path / "child.json");
    const auto rc = parse_run_config(doc);
    CHECK(rc.train.model.slots == 6);
    CHECK(rc.log_every == 9);
    CHECK(rc.data.preset.max_objects == 4);
    CHECK(rc.train.model.latent_dim == tetromino_train_preset().model.latent_dim);
    CHECK_THROWS_AS(load_config_document(dir.path / "absent.json"), IoError);
    std::ofstream(dir.path / "bad.json") << "{ not json";
    CHECK_THROWS_AS(load_config_document(dir.path / "bad.json"), ConfigError);
}

TEST_CASE("hash ignores run length and output location but not the model") {
    json doc = preset_document("tetromino");
    const auto base = parse_run_config(doc).hash();
    apply_override(doc, "train.total_steps=5");
    apply_override(doc, "out=elsewhere");
    CHECK(parse_run_config(doc).hash() == base);
    apply_override(doc, "seed=4");
    CHECK(parse_run_config(doc).hash() != base);
}

TEST_CASE("scene preset overrides") {
    const auto p = scene_preset_from(json{{"scene_preset", "sprites"}, {"min_objects", 5}, {"max_objects", 6}});
    CHECK(p.min_objects == 5);
    CHECK(p.max_objects == 6);
    CHECK_THROWS_AS(scene_preset_from(json{{"scene_preset", "sprites"}, {"min_objects", 4}, {"max_objects", 2}}),
                    ConfigError);
}

}  // TEST_SUITE
