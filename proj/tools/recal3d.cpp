#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "recal3d/gradsuite.hpp"
#include "recal3d/train.hpp"
#include "recal3d/volume_io.hpp"
#include "recal3d/weights_io.hpp"

using nlohmann::json;
using namespace recal3d;

namespace {

NetConfig parse_net_config(const json& j) {
    NetConfig cfg;
    cfg.in_channels = j.value("in_channels", cfg.in_channels);
    cfg.n_classes = j.value("n_classes", cfg.n_classes);
    if (j.contains("stage_channels")) {
        cfg.stage_channels.clear();
        for (const auto& pair : j.at("stage_channels")) {
            cfg.stage_channels.push_back({pair.at(0).get<int>(), pair.at(1).get<int>()});
        }
    }
    if (j.contains("block_kind")) {
        cfg.block_kind = block_kind_from_string(j.at("block_kind").get<std::string>());
    }
    if (j.contains("placement")) {
        cfg.placement = placement_from_string(j.at("placement").get<std::string>());
    }
    cfg.reduction = j.value("reduction", cfg.reduction);
    if (j.contains("pe_pooling")) {
        cfg.pe_pooling = pe_pooling_from_string(j.at("pe_pooling").get<std::string>());
    }
    if (j.contains("pe_aggregation")) {
        cfg.pe_aggregation =
            aggregation_from_string(j.at("pe_aggregation").get<std::string>());
    }
    return cfg;
}

PhantomSpec parse_phantom_spec(const json& j) {
    PhantomSpec s;
    s.h = j.value("h", s.h);
    s.w = j.value("w", s.w);
    s.d = j.value("d", s.d);
    s.n_classes = j.value("n_classes", s.n_classes);
    s.large_radius_min = j.value("large_radius_min", s.large_radius_min);
    s.large_radius_max = j.value("large_radius_max", s.large_radius_max);
    s.small_radius_min = j.value("small_radius_min", s.small_radius_min);
    s.small_radius_max = j.value("small_radius_max", s.small_radius_max);
    s.noise_amplitude = j.value("noise_amplitude", s.noise_amplitude);
    if (j.contains("class_means")) {
        s.class_means = j.at("class_means").get<std::vector<double>>();
    }
    return s;
}

TrainConfig parse_train_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open config '" + path + "'");
    json j = json::parse(f);
    TrainConfig cfg;
    if (j.contains("net")) cfg.net = parse_net_config(j.at("net"));
    cfg.epochs = j.value("epochs", cfg.epochs);
    cfg.lr0 = j.value("lr0", cfg.lr0);
    cfg.momentum = j.value("momentum", cfg.momentum);
    cfg.plateau_patience = j.value("plateau_patience", cfg.plateau_patience);
    cfg.plateau_factor = j.value("plateau_factor", cfg.plateau_factor);
    cfg.seed = j.value("seed", cfg.seed);
    if (j.contains("phantom")) cfg.phantom = parse_phantom_spec(j.at("phantom"));
    cfg.n_train = j.value("n_train", cfg.n_train);
    cfg.n_val = j.value("n_val", cfg.n_val);
    cfg.n_test = j.value("n_test", cfg.n_test);
    if (j.contains("augment")) {
        const json& a = j.at("augment");
        cfg.augment.rot90 = a.value("rot90", cfg.augment.rot90);
        cfg.augment.small_rotation = a.value("small_rotation", cfg.augment.small_rotation);
        cfg.augment.elastic = a.value("elastic", cfg.augment.elastic);
        cfg.augment.elastic_max_displacement =
            a.value("elastic_max_displacement", cfg.augment.elastic_max_displacement);
    }
    cfg.out_dir = j.value("out_dir", cfg.out_dir);
    cfg.surface_tolerance = j.value("surface_tolerance", cfg.surface_tolerance);
    return cfg;
}

json net_config_json(const NetConfig& c) {
    json j;
    j["in_channels"] = c.in_channels;
    j["n_classes"] = c.n_classes;
    j["stage_channels"] = c.stage_channels;
    j["block_kind"] = to_string(c.block_kind);
    j["placement"] = to_string(c.placement);
    j["reduction"] = c.reduction;
    j["pe_pooling"] = to_string(c.pe_pooling);
    j["pe_aggregation"] = to_string(c.pe_aggregation);
    return j;
}

void write_summary(const std::string& path, const TrainConfig& cfg, const MetricReport& rep) {
    json j;
    j["config"]["net"] = net_config_json(cfg.net);
    j["config"]["epochs"] = cfg.epochs;
    j["config"]["lr0"] = cfg.lr0;
    j["config"]["momentum"] = cfg.momentum;
    j["config"]["plateau_patience"] = cfg.plateau_patience;
    j["config"]["plateau_factor"] = cfg.plateau_factor;
    j["config"]["seed"] = cfg.seed;
    j["config"]["n_train"] = cfg.n_train;
    j["config"]["n_val"] = cfg.n_val;
    j["config"]["n_test"] = cfg.n_test;
    j["config"]["surface_tolerance"] = cfg.surface_tolerance;
    j["seed"] = rep.seed;
    j["best_epoch"] = rep.best_epoch;
    j["best_val_loss"] = rep.best_val_loss;
    // Foreground means exclude background class 0 (reported per-row in
    // metrics.csv).
    j["foreground_mean_excludes_background"] = true;
    j["mean_foreground_vol_dice"] = rep.mean_foreground_vol_dice;
    j["mean_foreground_surf_dice"] = rep.mean_foreground_surf_dice;
    j["total_params"] = rep.total_params;
    j["base_params"] = rep.base_params;
    j["overhead_fraction"] = rep.overhead_fraction;
    j["wall_seconds"] = rep.wall_seconds;
    std::ofstream f(path);
    f << j.dump(2) << "\n";
}

int cmd_train(const std::string& config_path, const std::string& out_dir) {
    TrainConfig cfg = parse_train_config(config_path);
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    MetricReport rep = train(cfg);
    if (!cfg.out_dir.empty()) {
        write_summary(cfg.out_dir + "/summary.json", cfg, rep);
    }
    std::printf("best epoch %d  val loss %.6f  mean fg vol dice %.4f  (%.1f s)\n",
                rep.best_epoch, rep.best_val_loss, rep.mean_foreground_vol_dice,
                rep.wall_seconds);
    return 0;
}

int cmd_eval(const std::string& weights_path, const std::string& config_path,
             const std::string& out_dir) {
    TrainConfig cfg = parse_train_config(config_path);
    Rng rng(0);
    SegNet net(cfg.net, rng);
    load_weights(weights_path, net);
    MetricReport rep = evaluate(net, cfg);
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        write_metrics_csv(out_dir + "/metrics.csv", rep.rows);
        write_summary(out_dir + "/summary.json", cfg, rep);
    }
    for (const MetricRow& r : rep.rows) {
        std::printf("volume %d class %d  vol dice %.4f  surf dice %.4f (tol %.2f)\n",
                    r.volume_id, r.class_id, r.vol_dice, r.surf_dice, r.tolerance);
    }
    std::printf("mean foreground vol dice %.4f  surf dice %.4f\n",
                rep.mean_foreground_vol_dice, rep.mean_foreground_surf_dice);
    return 0;
}

int cmd_gradcheck() {
    auto cases = run_gradient_suite(20240817);
    int failures = 0;
    for (const auto& c : cases) {
        bool ok = c.passed();
        std::printf("%-40s %-4s  max rel err %.3e (tol %.0e)\n", c.name.c_str(),
                    ok ? "ok" : "FAIL", c.max_rel_err, c.tol);
        failures += !ok;
    }
    if (failures) {
        std::printf("%d gradient check(s) failed\n", failures);
        return 1;
    }
    std::printf("all %zu gradient checks passed\n", cases.size());
    return 0;
}

int cmd_complexity(const std::string& config_path) {
    TrainConfig cfg = parse_train_config(config_path);
    NetConfig base = cfg.net;
    base.block_kind = BlockKind::None;
    base.placement = Placement::P0;
    long base_params = net_param_count(base);
    std::printf("base network parameters: %ld\n\n", base_params);
    std::printf("%-6s %-10s %-8s %-12s %-10s\n", "place", "block", "count", "params",
                "overhead");
    for (BlockKind kind : {BlockKind::Cse, BlockKind::Sse, BlockKind::ScSe, BlockKind::Cbam,
                           BlockKind::Pe}) {
        for (int p = 0; p <= 6; ++p) {
            NetConfig c = base;
            c.placement = static_cast<Placement>(p);
            if (c.placement != Placement::P0) {
                c.block_kind = kind;
                c.reduction = default_reduction(kind);
            }
            long total = net_param_count(c);
            double overhead =
                static_cast<double>(total - base_params) / static_cast<double>(base_params);
            std::printf("%-6s %-10s %-8d %-12ld %+.4f%%\n", to_string(c.placement).c_str(),
                        to_string(kind).c_str(), placement_block_count(c.placement), total,
                        100.0 * overhead);
        }
        std::printf("\n");
    }
    return 0;
}

int cmd_gen(const std::string& spec_path, std::uint64_t seed, const std::string& out_dir) {
    PhantomSpec spec;
    if (!spec_path.empty()) {
        std::ifstream f(spec_path);
        if (!f) throw std::runtime_error("cannot open spec '" + spec_path + "'");
        spec = parse_phantom_spec(json::parse(f));
    }
    Phantom p = generate(spec, seed);
    std::filesystem::create_directories(out_dir);
    save_volume(out_dir + "/intensity.vol", p.intensity);
    save_volume(out_dir + "/labels.vol", p.labels);
    std::printf("phantom seed %llu -> %s/{intensity,labels}.vol\n",
                static_cast<unsigned long long>(seed), out_dir.c_str());
    for (std::size_t c = 0; c < p.class_counts.size(); ++c) {
        std::printf("  class %zu: %lld voxels\n", c,
                    static_cast<long long>(p.class_counts[c]));
    }
    return 0;
}

int cmd_compare(const std::string& config_path, const std::string& out_dir, int n_seeds) {
    TrainConfig cfg = parse_train_config(config_path);
    auto rows = compare_blocks(cfg, n_seeds);
    std::filesystem::create_directories(out_dir);
    write_comparison_csv(out_dir + "/comparison.csv", rows);
    std::printf("%-8s %-12s %-12s\n", "block", "mean dice", "std");
    for (const auto& r : rows) {
        std::printf("%-8s %-12.4f %-12.4f\n", to_string(r.kind).c_str(), r.mean_dice,
                    r.std_dice);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"3D feature-recalibration blocks in a miniature volumetric "
                 "segmentation network"};
    app.require_subcommand(1);

    std::string config_path, out_dir, weights_path, spec_path;
    std::uint64_t seed = 0;
    int n_seeds = 5;

    auto* train_cmd = app.add_subcommand("train", "Train on synthetic phantoms");
    train_cmd->add_option("--config", config_path, "JSON config file")->required();
    train_cmd->add_option("--out", out_dir, "Output directory");

    auto* eval_cmd = app.add_subcommand("eval", "Evaluate saved weights on the test split");
    eval_cmd->add_option("--weights", weights_path, "Weights file")->required();
    eval_cmd->add_option("--config", config_path, "JSON config file")->required();
    eval_cmd->add_option("--out", out_dir, "Output directory");

    app.add_subcommand("gradcheck", "Run the finite-difference gradient suite");

    auto* cx_cmd = app.add_subcommand("complexity", "Parameter-count table per placement");
    cx_cmd->add_option("--config", config_path, "JSON config file")->required();

    auto* gen_cmd = app.add_subcommand("gen", "Generate one phantom volume pair");
    gen_cmd->add_option("--spec", spec_path, "Phantom spec JSON (defaults when omitted)");
    gen_cmd->add_option("--seed", seed, "Phantom seed")->required();
    gen_cmd->add_option("--out", out_dir, "Output directory")->required();

    auto* cmp_cmd = app.add_subcommand("compare", "Train each block kind over several seeds");
    cmp_cmd->add_option("--config", config_path, "JSON config file")->required();
    cmp_cmd->add_option("--out", out_dir, "Output directory")->required();
    cmp_cmd->add_option("--seeds", n_seeds, "Seeds per block kind");

    CLI11_PARSE(app, argc, argv);

    try {
        if (app.got_subcommand("train")) return cmd_train(config_path, out_dir);
        if (app.got_subcommand("eval")) return cmd_eval(weights_path, config_path, out_dir);
        if (app.got_subcommand("gradcheck")) return cmd_gradcheck();
        if (app.got_subcommand("complexity")) return cmd_complexity(config_path);
        if (app.got_subcommand("gen")) return cmd_gen(spec_path, seed, out_dir);
        if (app.got_subcommand("compare")) return cmd_compare(config_path, out_dir, n_seeds);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
