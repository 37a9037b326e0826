#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "recal3d/phantom.hpp"
#include "recal3d/segnet.hpp"

namespace recal3d {

struct AugmentConfig {
    bool rot90 = true;
    bool small_rotation = false;
    bool elastic = false;
    double elastic_max_displacement = 2.0;
};

struct TrainConfig {
    // Desk-scale default: 4 classes and half the standard stage widths,
    // sized so a full run finishes in minutes on one core.
    NetConfig net = [] {
        NetConfig n;
        n.n_classes = 4;
        n.stage_channels = {{8, 16}, {16, 32}, {32, 64}, {64, 128}};
        return n;
    }();
    int epochs = 40;
    double lr0 = 0.1;
    double momentum = 0.9;
    int plateau_patience = 10;
    double plateau_factor = 10.0;
    std::uint64_t seed = 7;
    PhantomSpec phantom;
    int n_train = 10, n_val = 2, n_test = 4;
    AugmentConfig augment;
    std::string out_dir;  // empty: no files written
    double surface_tolerance = 1.0;

    void validate() const;
};

struct EpochStat {
    int epoch = 0;
    double train_loss = 0.0, val_loss = 0.0, lr = 0.0;
};

struct MetricRow {
    int volume_id = 0, class_id = 0;
    double vol_dice = 0.0, surf_dice = 0.0, tolerance = 0.0;
};

struct MetricReport {
    std::vector<EpochStat> curve;
    std::vector<MetricRow> rows;
    long total_params = 0;
    long base_params = 0;
    double overhead_fraction = 0.0;
    // Mean over test volumes and foreground classes (background class 0 is
    // reported in rows but excluded from this aggregate).
    double mean_foreground_vol_dice = 0.0;
    double mean_foreground_surf_dice = 0.0;
    double wall_seconds = 0.0;
    std::uint64_t seed = 0;
    int best_epoch = 0;
    double best_val_loss = 0.0;
};

// v <- momentum * v + g ; p <- p - lr * v
class SgdMomentum {
public:
    SgdMomentum(double lr, double momentum) : lr_(lr), momentum_(momentum) {}

    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }

    void step(std::vector<std::pair<std::string, Tensor*>>& params, Tape& tape);

private:
    double lr_, momentum_;
    std::vector<std::vector<double>> velocity_;
};

// Divides lr by `factor` once the running best validation loss has not
// strictly improved (by more than 1e-4) for more than `patience`
// consecutive epochs; the counter resets on reduction. Floor 1e-6.
class PlateauScheduler {
public:
    PlateauScheduler(double lr0, int patience, double factor);

    double observe(double val_loss);
    double lr() const { return lr_; }

private:
    double lr_, factor_, best_;
    int patience_, since_improvement_ = 0;
};

// Seed for the phantom of split s ("train"/"val"/"test"), index i. The
// three splits are disjoint by construction.
std::uint64_t phantom_seed(std::uint64_t run_seed, int split, int index);

MetricReport train(const TrainConfig& cfg);

// Test-set metrics for an already-weighted network under cfg's phantom and
// split settings.
MetricReport evaluate(SegNet& net, const TrainConfig& cfg);

void write_metrics_csv(const std::string& path, const std::vector<MetricRow>& rows);
void write_losscurve_csv(const std::string& path, const std::vector<EpochStat>& curve);

struct CompareRow {
    BlockKind kind = BlockKind::None;
    double mean_dice = 0.0, std_dice = 0.0;
    int n_seeds = 0;
};

// Per-block-kind mean +- std of mean foreground volumetric Dice over
// n_seeds runs of the given budget (block placement taken from cfg).
std::vector<CompareRow> compare_blocks(TrainConfig cfg, int n_seeds);
void write_comparison_csv(const std::string& path, const std::vector<CompareRow>& rows);

}  // namespace recal3d
