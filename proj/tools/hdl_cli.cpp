// hdl: pipeline entry points (data generation, training, evaluation, serving).

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "hdl/dataset_io.hpp"
#include "hdl/dqn.hpp"
#include "hdl/evaluation.hpp"
#include "hdl/http.hpp"
#include "hdl/runtime.hpp"
#include "hdl/service.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Failure : std::runtime_error {
    std::string code;
    Failure(std::string code, const std::string& message) : std::runtime_error(message), code(std::move(code)) {}
};

struct Options {
    std::uint64_t seed = 1;
    std::string data_dir = "data";
    std::string weights = "artifacts/protonet.hdlw";
    std::string plan = "artifacts/plan.json";
    std::string map;
    std::size_t epochs = 100;
    std::size_t episodes = 100;
    std::string config;

    std::size_t shots = 1;
    std::size_t obs_height = hdl::dsp::kTargetHeight;
    std::size_t obs_width = hdl::dsp::kTargetWidth;
    std::string rewards = "artifacts/rewards.csv";
    std::string report = "artifacts/eval_grid.json";
    std::string condition;
    std::string host = "127.0.0.1";
    int port = 8080;
    std::string session_dir = "artifacts/sessions";
    std::size_t scan_threshold = 3;
};

// Values from the config file fill in options that were not given as flags.
void apply_config(CLI::App& app, Options& o) {
    if (o.config.empty()) return;
    std::ifstream in(o.config);
    if (!in) throw Failure("missing_artifact", "config file not found: " + o.config);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw Failure("bad_config", o.config + ": " + e.what());
    }
    auto fill = [&](const char* flag, const char* key, auto& field) {
        bool given = false;
        for (auto* sub : app.get_subcommands())
            if (const auto* opt = sub->get_option_no_throw(flag)) given = given || opt->count() > 0;
        if (!given && j.contains(key)) field = j[key].get<std::decay_t<decltype(field)>>();
    };
    fill("--seed", "seed", o.seed);
    fill("--data-dir", "data_dir", o.data_dir);
    fill("--weights", "weights", o.weights);
    fill("--plan", "plan", o.plan);
    fill("--map", "map", o.map);
    fill("--epochs", "epochs", o.epochs);
    fill("--episodes", "episodes", o.episodes);
    fill("--shots", "shots", o.shots);
    fill("--obs-height", "obs_height", o.obs_height);
    fill("--obs-width", "obs_width", o.obs_width);
    fill("--rewards", "rewards", o.rewards);
    fill("--report", "report", o.report);
    fill("--host", "host", o.host);
    fill("--port", "port", o.port);
    fill("--session-dir", "session_dir", o.session_dir);
    fill("--scan-threshold", "scan_threshold", o.scan_threshold);
}

void require_file(const std::string& path, const char* what) {
    if (!fs::exists(path)) throw Failure("missing_artifact", std::string(what) + " not found: " + path);
}

void write_json(const fs::path& path, const json& j) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw Failure("unwritable", "cannot write " + path.string());
    out << j.dump(2) << '\n';
}

hdl::ServiceConfig service_config(const Options& o) {
    hdl::ServiceConfig c;
    c.weights_path = o.weights;
    c.plan_path = o.plan;
    if (!o.map.empty()) c.map_path = o.map;
    c.data_dir = o.session_dir;
    c.bind_host = o.host;
    c.port = o.port;
    c.scan_threshold = o.scan_threshold;
    c.base_seed = o.seed;
    return c;
}

int cmd_gen_data(const Options& o) {
    try {
        fs::create_directories(o.data_dir);
    } catch (const fs::filesystem_error& e) {
        throw Failure("unwritable", e.what());
    }
    hdl::write_datasets(o.data_dir, o.seed, o.shots);
    std::cout << json{{"data_dir", o.data_dir}, {"seed", o.seed}, {"shots", o.shots},
                      {"samples_per_provenance", hdl::kStateCount * hdl::kConditionCount * o.shots}}
                     .dump()
              << '\n';
    return 0;
}

int cmd_eval_grid(const Options& o) {
    require_file((fs::path(o.data_dir) / "index.json").string(), "dataset index");
    const auto data = hdl::read_dataset(o.data_dir, hdl::Provenance::Virtual, hdl::enumerate_states());
    hdl::GridConfig cfg;
    cfg.protonet.epochs = o.epochs;
    const auto rows = hdl::evaluate_grid(data, o.seed, cfg, [](const hdl::GridRow& r) {
        std::printf("%-13s ssim %.4f  precision %.3f  recall %.3f\n", r.state.id().c_str(), r.mean_similarity,
                    r.metrics.macro_precision, r.metrics.macro_recall);
        std::fflush(stdout);
    });
    const json report = hdl::grid_json(rows);
    write_json(o.report, report);
    std::printf("spearman(ssim, recall) = %s\nreport: %s\n", report["spearman_ssim_recall"].dump().c_str(), o.report.c_str());
    return 0;
}

int cmd_train_dqn(const Options& o) {
    require_file((fs::path(o.data_dir) / "index.json").string(), "dataset index");
    const auto data = hdl::read_dataset(o.data_dir, hdl::Provenance::Virtual, hdl::enumerate_states());
    const auto env = hdl::make_env(hdl::preprocess_dataset(data), o.obs_height, o.obs_width);
    hdl::DqnConfig cfg;
    cfg.episodes = o.episodes;
    const auto result = hdl::train_dqn(env, o.seed, cfg);
    write_json(o.plan, hdl::plan_to_json(result.plan));
    if (fs::path(o.rewards).has_parent_path()) fs::create_directories(fs::path(o.rewards).parent_path());
    std::ofstream csv(o.rewards);
    if (!csv) throw Failure("unwritable", "cannot write " + o.rewards);
    hdl::write_reward_csv(csv, result.reward_history);
    std::cout << json{{"plan", hdl::plan_to_json(result.plan)["plan"]}, {"reward", result.plan.reward},
                      {"plan_file", o.plan}, {"rewards_file", o.rewards}}
                     .dump()
              << '\n';
    return 0;
}

int cmd_train_protonet(const Options& o) {
    require_file(o.plan, "plan manifest");
    require_file((fs::path(o.data_dir) / "index.json").string(), "dataset index");
    json plan_json = json::parse(std::ifstream(o.plan));
    const auto plan = hdl::plan_from_json(plan_json);
    const auto data = hdl::read_dataset(o.data_dir, hdl::Provenance::Virtual, plan.states);
    hdl::ProtoNetConfig cfg;
    cfg.epochs = o.epochs;
    hdl::ProtoNetTrace trace;
    auto model = hdl::train_protonet(hdl::FewShotSet::from_dataset(data), o.seed, cfg, &trace);
    const std::string bytes = hdl::encode_model(model);
    hdl::write_file_bytes(o.weights, bytes);
    plan_json["weights_fingerprint"] = hdl::fingerprint(bytes);
    write_json(o.plan, plan_json);

    const auto field = hdl::read_dataset(o.data_dir, hdl::Provenance::Field, plan.states);
    std::vector<std::vector<hdl::Tensor>> queries(hdl::kConditionCount);
    for (auto c : hdl::kAllConditions) {
        for (std::size_t k = 0; k < field.shots; ++k) {
            std::vector<hdl::Tensor> parts;
            for (std::size_t z = 0; z < field.n(); ++z) parts.push_back(hdl::preprocess_tensor(field.at(z, c, k)));
            queries[static_cast<std::size_t>(c)].push_back(hdl::stack_multimodal(std::span<const hdl::Tensor>(parts)));
        }
    }
    const auto metrics = hdl::metrics_json(hdl::evaluate(model, queries));
    std::cout << json{{"weights", o.weights}, {"weights_fingerprint", plan_json["weights_fingerprint"]},
                      {"final_loss", trace.loss.empty() ? 0.0 : trace.loss.back()}, {"field", metrics}}
                     .dump()
              << '\n';
    return 0;
}

int cmd_serve(const Options& o) {
    const auto cfg = service_config(o);
    hdl::SessionManager sessions(cfg, hdl::load_artifacts(cfg));
    httplib::Server server;
    hdl::install_routes(server, sessions);
    std::cout << json{{"listening", o.host + ":" + std::to_string(o.port)}}.dump() << std::endl;
    if (!server.listen(o.host, o.port)) throw Failure("bind_failed", "cannot bind " + o.host + ":" + std::to_string(o.port));
    return 0;
}

int cmd_diagnose(const Options& o) {
    const auto cfg = service_config(o);
    hdl::SessionManager sessions(cfg, hdl::load_artifacts(cfg));
    std::optional<hdl::Condition> cond;
    if (!o.condition.empty()) cond = hdl::parse_condition(o.condition);
    const auto result = hdl::run_scripted_session(sessions, cond, o.seed);
    std::cout << result.dump() << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    hdl::tune_allocator();
    CLI::App app{"Sensing-plan search, few-shot diagnosis and guided deployment"};
    app.require_subcommand(1);
    Options o;
    app.add_option("--config", o.config, "JSON file supplying values for flags not given");

    auto common = [&](CLI::App* sub) {
        sub->add_option("--seed", o.seed, "Random seed")->capture_default_str();
        sub->add_option("--data-dir", o.data_dir, "Dataset directory")->capture_default_str();
        sub->add_option("--config", o.config, "JSON file supplying values for flags not given");
    };
    auto* gen = app.add_subcommand("gen-data", "Generate Virtual and Field datasets for all states");
    common(gen);
    gen->add_option("--shots", o.shots, "Samples per state and condition")->capture_default_str();

    auto* grid = app.add_subcommand("eval-grid", "Per-state similarity and classifier accuracy report");
    common(grid);
    grid->add_option("--epochs", o.epochs, "Training epochs per state")->capture_default_str();
    grid->add_option("--report", o.report, "Output JSON report")->capture_default_str();

    auto* dqn = app.add_subcommand("train-dqn", "Search for the collection plan");
    common(dqn);
    dqn->add_option("--episodes", o.episodes, "Training episodes")->capture_default_str();
    dqn->add_option("--plan", o.plan, "Output plan manifest")->capture_default_str();
    dqn->add_option("--rewards", o.rewards, "Output reward history CSV")->capture_default_str();
    dqn->add_option("--obs-height", o.obs_height, "Observation height")->capture_default_str();
    dqn->add_option("--obs-width", o.obs_width, "Observation width")->capture_default_str();

    auto* proto = app.add_subcommand("train-protonet", "Train the classifier on the plan's Virtual data");
    common(proto);
    proto->add_option("--epochs", o.epochs, "Training epochs")->capture_default_str();
    proto->add_option("--plan", o.plan, "Plan manifest (fingerprint is written back)")->capture_default_str();
    proto->add_option("--weights", o.weights, "Output weights file")->capture_default_str();

    auto service_flags = [&](CLI::App* sub) {
        common(sub);
        sub->add_option("--plan", o.plan, "Plan manifest")->capture_default_str();
        sub->add_option("--weights", o.weights, "Weights file")->capture_default_str();
        sub->add_option("--map", o.map, "Map JSON (built-in map when omitted)");
        sub->add_option("--session-dir", o.session_dir, "Session log directory")->capture_default_str();
        sub->add_option("--scan-threshold", o.scan_threshold, "Anchor-visible cells required to initialize")
            ->capture_default_str();
    };
    auto* serve = app.add_subcommand("serve", "Run the HTTP session service");
    service_flags(serve);
    serve->add_option("--host", o.host, "Bind address")->capture_default_str();
    serve->add_option("--port", o.port, "Bind port")->capture_default_str();

    auto* diag = app.add_subcommand("diagnose", "Drive one scripted session headlessly");
    service_flags(diag);
    diag->add_option("--condition", o.condition, "Ground-truth condition (random when omitted)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        std::cerr << json{{"error", "usage"}, {"message", e.what()}}.dump() << '\n';
        return 2;
    }
    try {
        apply_config(app, o);
        if (*gen) return cmd_gen_data(o);
        if (*grid) return cmd_eval_grid(o);
        if (*dqn) return cmd_train_dqn(o);
        if (*proto) return cmd_train_protonet(o);
        if (*serve) return cmd_serve(o);
        if (*diag) return cmd_diagnose(o);
    } catch (const Failure& e) {
        std::cerr << json{{"error", e.code}, {"message", e.what()}}.dump() << '\n';
        return 2;
    } catch (const hdl::ApiError& e) {
        std::cerr << json{{"error", e.code}, {"message", e.what()}}.dump() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << json{{"error", "failed"}, {"message", e.what()}}.dump() << '\n';
        return 1;
    }
    return 1;
}
