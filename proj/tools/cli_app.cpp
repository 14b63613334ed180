#include "cli_app.hpp"

#include <filesystem>
#include <optional>
#include <ostream>

#include <CLI11.hpp>

#include "trojanscope/model_io.hpp"
#include "trojanscope/pipeline.hpp"

namespace trojanscope {

using nlohmann::json;

namespace {

// Command-line overrides; unset options leave the file or default value alone.
struct Overrides {
    std::optional<std::uint64_t> seed;
    std::optional<std::string> zoo_dir, artifacts_dir, reports_dir;
    std::optional<std::string> train_images, train_labels, test_images, test_labels;
    std::optional<int> train_count, test_count, workers, zoo_epochs;
    std::optional<double> xi_linf, xi_l2, delta, epsilon;
    std::optional<int> max_outer_linf, max_outer_l2, batches, clean_pool, fgsm_steps, fgsm_pool;
    std::optional<int> detector_epochs, folds, embedding_dim;

    json patch() const
    {
        json p = json::object();
        auto set = [&](const char* section, const char* key, const auto& v) {
            if (v)
                p[section][key] = *v;
        };
        if (seed)
            p["seed"] = *seed;
        set("paths", "zoo", zoo_dir);
        set("paths", "artifacts", artifacts_dir);
        set("paths", "reports", reports_dir);
        set("data", "train_images", train_images);
        set("data", "train_labels", train_labels);
        set("data", "test_images", test_images);
        set("data", "test_labels", test_labels);
        set("data", "train_count", train_count);
        set("data", "test_count", test_count);
        set("zoo", "workers", workers);
        set("zoo", "epochs", zoo_epochs);
        set("perturbation", "xi_linf", xi_linf);
        set("perturbation", "xi_l2", xi_l2);
        set("perturbation", "delta", delta);
        set("perturbation", "max_outer_linf", max_outer_linf);
        set("perturbation", "max_outer_l2", max_outer_l2);
        set("perturbation", "batches", batches);
        set("perturbation", "clean_pool", clean_pool);
        set("fgsm", "epsilon", epsilon);
        set("fgsm", "max_steps", fgsm_steps);
        set("fgsm", "pool", fgsm_pool);
        set("detector", "epochs", detector_epochs);
        set("detector", "folds", folds);
        set("detector", "embedding_dim", embedding_dim);
        return p;
    }
};

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err)
{
    CLI::App app{"trojanscope: backdoor detection for image classifiers"};
    app.require_subcommand(0, 1);
    std::string config_file;
    bool print_config = false;
    Overrides o;
    app.add_option("-c,--config", config_file, "JSON run configuration");
    app.add_flag("--print-config", print_config, "print the effective configuration and exit");
    app.add_option("--seed", o.seed, "master seed");
    app.add_option("--zoo-dir", o.zoo_dir);
    app.add_option("--artifacts-dir", o.artifacts_dir);
    app.add_option("--reports-dir", o.reports_dir);
    app.add_option("--train-images", o.train_images, "IDX image file (optionally gzipped)");
    app.add_option("--train-labels", o.train_labels);
    app.add_option("--test-images", o.test_images);
    app.add_option("--test-labels", o.test_labels);
    app.add_option("--train-count", o.train_count);
    app.add_option("--test-count", o.test_count);
    app.add_option("--workers", o.workers, "zoo training threads");
    app.add_option("--zoo-epochs", o.zoo_epochs);
    app.add_option("--xi-linf", o.xi_linf);
    app.add_option("--xi-l2", o.xi_l2);
    app.add_option("--delta", o.delta, "target fooling rate is 1 - delta");
    app.add_option("--max-outer-linf", o.max_outer_linf);
    app.add_option("--max-outer-l2", o.max_outer_l2);
    app.add_option("--batches", o.batches, "fingerprints per model");
    app.add_option("--clean-pool", o.clean_pool);
    app.add_option("--epsilon", o.epsilon, "FGSM step size");
    app.add_option("--fgsm-steps", o.fgsm_steps);
    app.add_option("--fgsm-pool", o.fgsm_pool);
    app.add_option("--detector-epochs", o.detector_epochs);
    app.add_option("--folds", o.folds);
    app.add_option("--embedding-dim", o.embedding_dim);

    std::string selector, model_path, model_id;
    std::optional<double> p_trojan;
    auto* zoo = app.add_subcommand("zoo", "train the model zoo");
    auto* fp = app.add_subcommand("fingerprint", "build universal-perturbation fingerprints");
    fp->add_option("--select", selector, "regex over model ids");
    auto* train = app.add_subcommand("train", "cross-validate and fit the detector");
    auto* detect = app.add_subcommand("detect", "analyse one model file");
    detect->add_option("--model", model_path, "model file")->required();
    detect->add_option("--id", model_id, "report name (default: file stem)");
    detect->add_option("--p-trojan", p_trojan, "skip the detector and use this probability");
    auto* target = app.add_subcommand("target-class", "target-class prediction on any-to-one zoo models");
    target->add_option("--select", selector, "regex over model ids");
    auto* eval = app.add_subcommand("eval", "detection, ablation, cross-trigger, target and sweep tables");

    std::vector<std::string> argv(args.rbegin(), args.rend());
    try {
        app.parse(argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err);
    }

    if (app.get_subcommands().empty() && !print_config) {
        err << "a command is required\n" << app.help();
        return 2;
    }

    try {
        if (!config_file.empty() && !std::filesystem::exists(config_file))
            throw ConfigError("config file " + config_file + " does not exist");
        json j = config_file.empty() ? json::object() : json::parse(read_text(config_file));
        j.merge_patch(o.patch());
        const RunConfig c = run_config_from_json(j);
        if (print_config) {
            out << to_json(c).dump(2) << "\n";
            return 0;
        }
        if (zoo->parsed())
            cmd_zoo(c, out);
        else if (fp->parsed())
            cmd_fingerprint(c, selector, out);
        else if (train->parsed())
            cmd_train(c, out);
        else if (detect->parsed())
            cmd_detect(c, model_path, model_id, p_trojan, out);
        else if (target->parsed())
            cmd_target_class(c, selector, out);
        else if (eval->parsed())
            cmd_eval(c, out);
    } catch (const ConfigError& e) {
        err << "configuration error: " << e.what() << "\n";
        return 2;
    } catch (const json::exception& e) {
        err << "configuration error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

}  // namespace trojanscope
