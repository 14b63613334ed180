#include <filesystem>
#include <sstream>

#include <gtest/gtest.h>

#include "cli_app.hpp"
#include "trojanscope/model_io.hpp"
#include "trojanscope/pipeline.hpp"

using namespace trojanscope;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct CliResult {
    int code;
    std::string out;
    std::string err;
};

CliResult cli(std::vector<std::string> args)
{
    std::ostringstream out, err;
    const int code = run_cli(args, out, err);
    return {code, out.str(), err.str()};
}

class TempDir {
public:
    explicit TempDir(const std::string& name) : path_(fs::temp_directory_path() / name)
    {
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() { fs::remove_all(path_); }
    const fs::path& path() const { return path_; }

private:
    fs::path path_;
};

json tiny_config(const fs::path& root)
{
    return {{"paths",
             {{"zoo", (root / "zoo").string()},
              {"artifacts", (root / "artifacts").string()},
              {"reports", (root / "reports").string()}}},
            {"seed", 5},
            {"data", {{"train_count", 500}, {"test_count", 100}}},
            {"zoo",
             {{"epochs", 1},
              {"cells",
               {{{"architecture", "ModdedBadNet"}, {"kind", "benign"}, {"count", 3}},
                {{"architecture", "ModdedBadNet"}, {"kind", "any_to_one"}, {"count", 2}},
                {{"architecture", "ModdedBadNet"}, {"kind", "any_to_any"}, {"count", 1}}}}}},
            {"perturbation", {{"batches", 2}, {"clean_pool", 20}, {"max_outer_linf", 1}, {"max_outer_l2", 1}}},
            {"fgsm", {{"pool", 20}, {"max_steps", 3}}},
            {"detector", {{"mlp_widths", {8}}, {"embedding_dim", 4}, {"epochs", 2}, {"folds", 2}}},
            {"eval", {{"ablations", json::array()}}}};
}

fs::path write_config(const fs::path& dir, const json& j)
{
    const fs::path p = dir / "config.json";
    write_text(p, j.dump(2));
    return p;
}

}  // namespace

TEST(RunConfig, DefaultsMatchDocumentedValues)
{
    const RunConfig c = run_config_from_json(json::object());
    int models = 0;
    for (const auto& cell : c.zoo.cells)
        models += cell.count;
    EXPECT_EQ(models, 84);
    EXPECT_EQ(c.zoo.training.epochs, 5);
    EXPECT_EQ(c.fingerprint.xi_linf, 1.0);
    EXPECT_EQ(c.fingerprint.xi_l2, 10.0);
    EXPECT_EQ(c.fingerprint.delta, 0.2);
    EXPECT_EQ(c.fingerprint.max_outer_linf, 10);
    EXPECT_EQ(c.fingerprint.batches, 10);
    EXPECT_EQ(c.target.fgsm.epsilon, 0.05);
    EXPECT_EQ(c.target.threshold, 2.0);
    EXPECT_EQ(c.detector.folds, 5);
    EXPECT_EQ(c.detector.epochs, 30);
    EXPECT_EQ(c.detector.batch_size, 16);
}

TEST(RunConfig, JsonRoundTripAndHashes)
{
    const RunConfig a = run_config_from_json(json::object());
    const RunConfig b = run_config_from_json(to_json(a));
    EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
    EXPECT_EQ(config_hash(a), config_hash(b));

    RunConfig moved = a;
    moved.zoo_dir = "elsewhere";
    EXPECT_EQ(config_hash(moved), config_hash(a));

    RunConfig d = a;
    d.fingerprint.xi_linf = 0.5;
    EXPECT_EQ(zoo_hash(d), zoo_hash(a));
    EXPECT_NE(fingerprint_hash(d), fingerprint_hash(a));
    EXPECT_NE(detector_hash(d), detector_hash(a));
    EXPECT_EQ(target_hash(d), target_hash(a));
}

TEST(RunConfig, BalancedBlockExpands)
{
    const json j = {{"zoo",
                     {{"balanced",
                       {{"architectures", {"BadNet"}}, {"trojan_per_arch", 4}, {"epochs", {{"BadNet", 9}}}}}}}};
    const RunConfig c = run_config_from_json(j);
    int models = 0;
    for (const auto& cell : c.zoo.cells) {
        EXPECT_EQ(cell.architecture, Architecture::badnet);
        EXPECT_EQ(cell.epochs, 9);
        models += cell.count;
    }
    EXPECT_EQ(models, 8);
}

TEST(RunConfig, RejectsUnknownAblationAndOversizedPools)
{
    EXPECT_THROW(run_config_from_json({{"eval", {{"ablations", {"bogus"}}}}}), ConfigError);
    EXPECT_THROW(run_config_from_json({{"data", {{"test_count", 100}}}}), ConfigError);
}

TEST(Cli, FlagOverridesFileOverridesDefault)
{
    TempDir dir("trojanscope_cli_precedence");
    const auto cfg = write_config(dir.path(), {{"perturbation", {{"xi_linf", 0.5}, {"delta", 0.3}}}});

    auto r = cli({"--print-config", "zoo"});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(json::parse(r.out)["perturbation"]["xi_linf"], 1.0);

    r = cli({"-c", cfg.string(), "--print-config", "zoo"});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(json::parse(r.out)["perturbation"]["xi_linf"], 0.5);

    r = cli({"-c", cfg.string(), "--xi-linf", "0.25", "--print-config", "zoo"});
    ASSERT_EQ(r.code, 0) << r.err;
    const json j = json::parse(r.out);
    EXPECT_EQ(j["perturbation"]["xi_linf"], 0.25);
    EXPECT_EQ(j["perturbation"]["delta"], 0.3);
}

TEST(Cli, BadArgumentsAndMissingFiles)
{
    EXPECT_NE(cli({}).code, 0);
    EXPECT_NE(cli({"frobnicate"}).code, 0);
    EXPECT_EQ(cli({"-c", "/nonexistent/config.json", "zoo"}).code, 2);
    const auto r = cli({"--train-images", "/nonexistent/images.idx", "--test-images", "/nonexistent/t.idx", "zoo"});
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("does not exist"), std::string::npos);
}

TEST(Cli, InvalidZooPathFailsBeforeTraining)
{
    TempDir dir("trojanscope_cli_badpath");
    write_text(dir.path() / "blocker", "not a directory");
    json j = tiny_config(dir.path());
    j["paths"]["zoo"] = (dir.path() / "blocker" / "zoo").string();
    const auto r = cli({"-c", write_config(dir.path(), j).string(), "zoo"});
    EXPECT_EQ(r.code, 2);
    EXPECT_FALSE(fs::exists(dir.path() / "artifacts" / "fingerprints"));
}

TEST(Cli, CommandsBeforeTheirInputsExistAreConfigErrors)
{
    TempDir dir("trojanscope_cli_order");
    const auto cfg = write_config(dir.path(), tiny_config(dir.path())).string();
    EXPECT_EQ(cli({"-c", cfg, "fingerprint"}).code, 2);
    EXPECT_EQ(cli({"-c", cfg, "train"}).code, 2);
    EXPECT_EQ(cli({"-c", cfg, "detect", "--model", "x.tsm"}).code, 2);
}

TEST(Cli, MinimalPipelineIsResumable)
{
    TempDir dir("trojanscope_cli_pipeline");
    const json j = tiny_config(dir.path());
    const auto cfg = write_config(dir.path(), j).string();

    auto r = cli({"-c", cfg, "zoo"});
    ASSERT_EQ(r.code, 0) << r.err;
    int rows = 0;
    for (std::size_t pos = 0; (pos = r.out.find("\nModdedBadNet-", pos)) != std::string::npos; ++pos)
        ++rows;
    EXPECT_EQ(rows, 6);  // one summary row per model
    const std::string manifest = read_text(dir.path() / "zoo" / "manifest.json");
    r = cli({"-c", cfg, "zoo"});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(r.out.find(" trained"), std::string::npos);
    EXPECT_EQ(read_text(dir.path() / "zoo" / "manifest.json"), manifest);

    // Fingerprints for a subset, then the rest, then nothing left to do.
    r = cli({"-c", cfg, "fingerprint", "--select", "benign"});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("[3/3]"), std::string::npos);
    EXPECT_EQ(cli({"-c", cfg, "train"}).code, 2);  // Trojaned fingerprints missing
    r = cli({"-c", cfg, "fingerprint"});
    EXPECT_NE(r.out.find("[3/3]"), std::string::npos);
    r = cli({"-c", cfg, "fingerprint"});
    EXPECT_NE(r.out.find("up to date"), std::string::npos);

    // Changing a generator setting must not silently mix artifacts.
    r = cli({"-c", cfg, "--xi-linf", "0.5", "fingerprint"});
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("different configuration"), std::string::npos);

    r = cli({"-c", cfg, "train"});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("cross-validated accuracy"), std::string::npos);
    const json cv = json::parse(read_text(dir.path() / "reports" / "cv.json"));
    EXPECT_EQ(cv["cv"]["folds"].size(), 2u);
    const std::string detector = read_text(dir.path() / "artifacts" / "detector.tsm");
    ASSERT_EQ(cli({"-c", cfg, "train"}).code, 0);
    EXPECT_EQ(read_text(dir.path() / "artifacts" / "detector.tsm"), detector);

    const auto model = dir.path() / "zoo" / "models" / "ModdedBadNet-any_to_one-type_i-p010-000.tsm";
    r = cli({"-c", cfg, "detect", "--model", model.string(), "--p-trojan", "1"});
    ASSERT_EQ(r.code, 0) << r.err;
    const fs::path report = dir.path() / "reports" / "detect" / "ModdedBadNet-any_to_one-type_i-p010-000.json";
    ASSERT_TRUE(fs::exists(report));
    const json rep = json::parse(read_text(report));
    EXPECT_EQ(rep["report"]["sigma"].size(), 10u);
    EXPECT_TRUE(rep.contains("config_hash"));
    EXPECT_TRUE(fs::exists(report.parent_path() / "ModdedBadNet-any_to_one-type_i-p010-000.sigma.tsv"));

    r = cli({"-c", cfg, "target-class"});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("over 2 any-to-one models"), std::string::npos);
}
