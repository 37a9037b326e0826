#include "recal3d/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "recal3d/losses.hpp"
#include "recal3d/metrics.hpp"
#include "recal3d/weights_io.hpp"

namespace recal3d {

void TrainConfig::validate() const {
    net.validate();
    phantom.validate();
    if (lr0 <= 0.0) throw std::invalid_argument("lr0 must be > 0");
    if (plateau_factor <= 1.0) throw std::invalid_argument("plateau_factor must be > 1");
    if (plateau_patience < 1) throw std::invalid_argument("plateau_patience must be >= 1");
    if (epochs < 1 || n_train < 1 || n_val < 1 || n_test < 1) {
        throw std::invalid_argument("counts must be >= 1");
    }
    if (phantom.n_classes != net.n_classes) {
        throw std::invalid_argument("phantom n_classes must match net n_classes");
    }
}

void SgdMomentum::step(std::vector<std::pair<std::string, Tensor*>>& params, Tape& tape) {
    if (velocity_.empty()) {
        for (auto& [name, t] : params) velocity_.emplace_back(t->size(), 0.0);
    }
    if (velocity_.size() != params.size()) {
        throw std::invalid_argument("optimizer state does not match parameter list");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor* t = params[i].second;
        const auto& g = tape.grad(*t);
        auto& v = velocity_[i];
        for (std::size_t j = 0; j < v.size(); ++j) {
            // missing gradient (parameter unused in this graph) counts as 0
            v[j] = momentum_ * v[j] + (g.empty() ? 0.0 : g[j]);
            t->data()[j] -= lr_ * v[j];
        }
    }
}

PlateauScheduler::PlateauScheduler(double lr0, int patience, double factor)
    : lr_(lr0), factor_(factor), best_(std::numeric_limits<double>::infinity()),
      patience_(patience) {}

double PlateauScheduler::observe(double val_loss) {
    constexpr double kImproveEps = 1e-4;
    constexpr double kFloor = 1e-6;
    if (val_loss < best_ - kImproveEps) {
        best_ = val_loss;
        since_improvement_ = 0;
    } else {
        ++since_improvement_;
        if (since_improvement_ > patience_) {
            lr_ = std::max(kFloor, lr_ / factor_);
            since_improvement_ = 0;
        }
    }
    return lr_;
}

std::uint64_t phantom_seed(std::uint64_t run_seed, int split, int index) {
    Rng r(run_seed);
    return r.fork(static_cast<std::uint64_t>(split) * 0x10000 + index).next_u64();
}

namespace {

constexpr int kTrainSplit = 1, kValSplit = 2, kTestSplit = 3;

Phantom maybe_augment(const Phantom& p, const AugmentConfig& aug, Rng& rng) {
    Phantom cur = p;
    if (aug.rot90 && rng.next_double() < 0.5) {
        cur = augment(cur, rng, AugmentKind::Rot90);
    }
    if (aug.small_rotation && rng.next_double() < 0.5) {
        cur = augment(cur, rng, AugmentKind::SmallRotation);
    }
    if (aug.elastic && rng.next_double() < 0.5) {
        cur = augment(cur, rng, AugmentKind::Elastic, aug.elastic_max_displacement);
    }
    return cur;
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::vector<std::vector<double>> snapshot(std::vector<std::pair<std::string, Tensor*>>& params) {
    std::vector<std::vector<double>> out;
    out.reserve(params.size());
    for (auto& [name, t] : params) {
        out.emplace_back(t->data(), t->data() + t->size());
    }
    return out;
}

void restore(std::vector<std::pair<std::string, Tensor*>>& params,
             const std::vector<std::vector<double>>& snap) {
    for (std::size_t i = 0; i < params.size(); ++i) {
        std::copy(snap[i].begin(), snap[i].end(), params[i].second->data());
    }
}

}  // namespace

MetricReport evaluate(SegNet& net, const TrainConfig& cfg) {
    net.detach_all();
    MetricReport rep;
    rep.seed = cfg.seed;
    double fg_vol = 0.0, fg_surf = 0.0;
    int fg_n = 0;
    for (int i = 0; i < cfg.n_test; ++i) {
        Phantom p = generate(cfg.phantom, phantom_seed(cfg.seed, kTestSplit, i));
        Tensor logits = net.forward(p.intensity);
        LabelVolume pred = argmax_labels(logits);
        for (int c = 0; c < cfg.phantom.n_classes; ++c) {
            MetricRow row;
            row.volume_id = i;
            row.class_id = c;
            row.vol_dice = volumetric_dice(pred, p.labels, c);
            row.surf_dice = surface_dice(pred, p.labels, c, cfg.surface_tolerance);
            row.tolerance = cfg.surface_tolerance;
            rep.rows.push_back(row);
            if (c > 0) {
                fg_vol += row.vol_dice;
                fg_surf += row.surf_dice;
                ++fg_n;
            }
        }
    }
    if (fg_n > 0) {
        rep.mean_foreground_vol_dice = fg_vol / fg_n;
        rep.mean_foreground_surf_dice = fg_surf / fg_n;
    }
    ParamReport pr = param_report(net);
    rep.total_params = pr.total;
    rep.base_params = pr.base;
    rep.overhead_fraction = pr.overhead_fraction;
    return rep;
}

MetricReport train(const TrainConfig& cfg) {
    cfg.validate();
    auto t0 = std::chrono::steady_clock::now();

    Rng init_rng(phantom_seed(cfg.seed, 0, 0));
    SegNet net(cfg.net, init_rng);
    auto params = net.parameters();

    std::vector<Phantom> train_set, val_set;
    for (int i = 0; i < cfg.n_train; ++i) {
        train_set.push_back(generate(cfg.phantom, phantom_seed(cfg.seed, kTrainSplit, i)));
    }
    for (int i = 0; i < cfg.n_val; ++i) {
        val_set.push_back(generate(cfg.phantom, phantom_seed(cfg.seed, kValSplit, i)));
    }

    std::vector<std::int64_t> corpus_counts(cfg.phantom.n_classes, 0);
    for (const Phantom& p : train_set) {
        for (int c = 0; c < cfg.phantom.n_classes; ++c) corpus_counts[c] += p.class_counts[c];
    }
    std::vector<double> class_weights = median_freq_weights(corpus_counts);

    SgdMomentum opt(cfg.lr0, cfg.momentum);
    PlateauScheduler sched(cfg.lr0, cfg.plateau_patience, cfg.plateau_factor);

    MetricReport rep;
    rep.seed = cfg.seed;
    double best_val = std::numeric_limits<double>::infinity();
    std::vector<std::vector<double>> best_params = snapshot(params);
    rep.best_epoch = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        double train_loss = 0.0;
        for (int i = 0; i < static_cast<int>(train_set.size()); ++i) {
            Rng aug_rng(phantom_seed(cfg.seed, 4, epoch * 4096 + i));
            Phantom vol = maybe_augment(train_set[i], cfg.augment, aug_rng);

            Tape tape;
            net.watch_all(tape);
            Tensor logits = net.forward(vol.intensity);
            Tensor loss = combined_loss(logits, vol.labels, class_weights);
            double lv = loss.data()[0];
            if (!std::isfinite(lv)) {
                throw std::runtime_error("non-finite training loss at epoch " +
                                         std::to_string(epoch) + " (lr=" +
                                         fmt_double(opt.lr()) + ")");
            }
            train_loss += lv;
            tape.backward(loss);
            opt.step(params, tape);
        }
        train_loss /= static_cast<double>(train_set.size());

        net.detach_all();
        double val_loss = 0.0;
        for (const Phantom& p : val_set) {
            Tensor logits = net.forward(p.intensity);
            val_loss += combined_loss(logits, p.labels, class_weights).data()[0];
        }
        val_loss /= static_cast<double>(val_set.size());
        if (!std::isfinite(val_loss)) {
            throw std::runtime_error("non-finite validation loss at epoch " +
                                     std::to_string(epoch) + " (lr=" + fmt_double(opt.lr()) +
                                     ")");
        }

        EpochStat st;
        st.epoch = epoch;
        st.train_loss = train_loss;
        st.val_loss = val_loss;
        st.lr = opt.lr();
        rep.curve.push_back(st);

        if (val_loss < best_val) {
            best_val = val_loss;
            best_params = snapshot(params);
            rep.best_epoch = epoch;
        }
        opt.set_lr(sched.observe(val_loss));
    }

    restore(params, best_params);
    rep.best_val_loss = best_val;

    MetricReport eval_rep = evaluate(net, cfg);
    rep.rows = std::move(eval_rep.rows);
    rep.mean_foreground_vol_dice = eval_rep.mean_foreground_vol_dice;
    rep.mean_foreground_surf_dice = eval_rep.mean_foreground_surf_dice;
    rep.total_params = eval_rep.total_params;
    rep.base_params = eval_rep.base_params;
    rep.overhead_fraction = eval_rep.overhead_fraction;

    rep.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    if (!cfg.out_dir.empty()) {
        std::filesystem::create_directories(cfg.out_dir);
        save_weights(cfg.out_dir + "/weights.bin", net);
        write_metrics_csv(cfg.out_dir + "/metrics.csv", rep.rows);
        write_losscurve_csv(cfg.out_dir + "/losscurve.csv", rep.curve);
    }
    return rep;
}

void write_metrics_csv(const std::string& path, const std::vector<MetricRow>& rows) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
    // Background (class 0) rows are present but excluded from the report's
    // foreground mean aggregates.
    f << "volume_id,class_id,vol_dice,surf_dice,tolerance\n";
    for (const MetricRow& r : rows) {
        f << r.volume_id << "," << r.class_id << "," << fmt_double(r.vol_dice) << ","
          << fmt_double(r.surf_dice) << "," << fmt_double(r.tolerance) << "\n";
    }
}

void write_losscurve_csv(const std::string& path, const std::vector<EpochStat>& curve) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
    f << "epoch,train_loss,val_loss,lr\n";
    for (const EpochStat& s : curve) {
        f << s.epoch << "," << fmt_double(s.train_loss) << "," << fmt_double(s.val_loss) << ","
          << fmt_double(s.lr) << "\n";
    }
}

std::vector<CompareRow> compare_blocks(TrainConfig cfg, int n_seeds) {
    cfg.out_dir.clear();
    std::vector<CompareRow> out;
    for (BlockKind kind : {BlockKind::None, BlockKind::Cse, BlockKind::Sse, BlockKind::ScSe,
                           BlockKind::Cbam, BlockKind::Pe}) {
        TrainConfig c = cfg;
        c.net.block_kind = kind;
        if (kind == BlockKind::None) {
            c.net.placement = Placement::P0;
        } else {
            if (c.net.placement == Placement::P0) c.net.placement = Placement::P6;
            c.net.reduction = default_reduction(kind);
        }
        std::vector<double> scores;
        for (int s = 0; s < n_seeds; ++s) {
            c.seed = cfg.seed + static_cast<std::uint64_t>(s);
            scores.push_back(train(c).mean_foreground_vol_dice);
        }
        CompareRow row;
        row.kind = kind;
        row.n_seeds = n_seeds;
        double mean = 0.0;
        for (double v : scores) mean += v;
        mean /= scores.size();
        double var = 0.0;
        for (double v : scores) var += (v - mean) * (v - mean);
        var /= scores.size();
        row.mean_dice = mean;
        row.std_dice = std::sqrt(var);
        out.push_back(row);
    }
    return out;
}

void write_comparison_csv(const std::string& path, const std::vector<CompareRow>& rows) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
    f << "block_kind,mean_fg_vol_dice,std_fg_vol_dice,n_seeds\n";
    for (const CompareRow& r : rows) {
        f << to_string(r.kind) << "," << fmt_double(r.mean_dice) << ","
          << fmt_double(r.std_dice) << "," << r.n_seeds << "\n";
    }
}

}  // namespace recal3d
