#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "recal3d/train.hpp"

using namespace recal3d;

namespace {

TrainConfig tiny_config() {
    TrainConfig cfg;
    cfg.net.stage_channels = {{2, 4}, {4, 4}, {4, 4}, {4, 8}};
    cfg.epochs = 2;
    cfg.n_train = 2;
    cfg.n_val = 1;
    cfg.n_test = 1;
    return cfg;
}

}  // namespace

TEST_CASE("sgd with momentum follows the two-step hand recursion") {
    const double lr = 0.1, g = 2.0, p0 = 1.0;
    Tensor p = Tensor::constant({1, 1, 1, 1}, p0);
    std::vector<std::pair<std::string, Tensor*>> params = {{"p", &p}};
    SgdMomentum opt(lr, 0.9);

    {
        Tape tape;
        tape.watch(p);
        tape.backward(scale(sum(p), g));
        opt.step(params, tape);
    }
    CHECK(p.data()[0] == doctest::Approx(p0 - lr * g).epsilon(1e-15));
    {
        Tape tape;
        tape.watch(p);
        tape.backward(scale(sum(p), g));
        opt.step(params, tape);
    }
    // v2 = 0.9 * g + g = 1.9 g
    CHECK(p.data()[0] == doctest::Approx(p0 - lr * g - lr * 1.9 * g).epsilon(1e-15));
}

TEST_CASE("zero momentum reduces to plain gradient descent") {
    Tensor p = Tensor::constant({2, 1, 1, 1}, 3.0);
    std::vector<std::pair<std::string, Tensor*>> params = {{"p", &p}};
    SgdMomentum opt(0.5, 0.0);
    for (int step = 0; step < 3; ++step) {
        Tape tape;
        tape.watch(p);
        tape.backward(scale(sum(p), 1.0));
        opt.step(params, tape);
    }
    CHECK(p.data()[0] == doctest::Approx(3.0 - 3 * 0.5).epsilon(1e-15));
    CHECK(p.data()[1] == doctest::Approx(3.0 - 3 * 0.5).epsilon(1e-15));
}

TEST_CASE("a zero learning rate leaves parameters untouched") {
    Tensor p = Tensor::constant({1, 1, 1, 1}, 7.0);
    std::vector<std::pair<std::string, Tensor*>> params = {{"p", &p}};
    SgdMomentum opt(0.0, 0.9);
    Tape tape;
    tape.watch(p);
    tape.backward(scale(sum(p), 5.0));
    opt.step(params, tape);
    CHECK(p.data()[0] == 7.0);
}

TEST_CASE("parameters without gradients keep their values") {
    Tensor used = Tensor::constant({1, 1, 1, 1}, 1.0);
    Tensor idle = Tensor::constant({1, 1, 1, 1}, 4.0);
    std::vector<std::pair<std::string, Tensor*>> params = {{"used", &used}, {"idle", &idle}};
    SgdMomentum opt(0.1, 0.9);
    Tape tape;
    tape.watch(used);
    tape.watch(idle);
    tape.backward(sum(used));  // idle never enters the graph
    opt.step(params, tape);
    CHECK(used.data()[0] == doctest::Approx(0.9).epsilon(1e-15));
    CHECK(idle.data()[0] == 4.0);
}

TEST_CASE("plateau scheduler holds while the loss improves") {
    PlateauScheduler sched(0.1, 10, 10.0);
    double loss = 1.0;
    for (int e = 0; e < 30; ++e) {
        loss -= 0.01;  // strict improvement every epoch
        CHECK(sched.observe(loss) == 0.1);
    }
}

TEST_CASE("plateau scheduler divides after eleven flat epochs") {
    PlateauScheduler sched(0.1, 10, 10.0);
    CHECK(sched.observe(1.0) == 0.1);  // establishes the best
    for (int e = 0; e < 10; ++e) {
        CHECK(sched.observe(1.0) == 0.1);  // within patience
    }
    CHECK(sched.observe(1.0) == doctest::Approx(0.01).epsilon(1e-15));
    // counter resets after a reduction
    for (int e = 0; e < 10; ++e) {
        CHECK(sched.observe(1.0) == doctest::Approx(0.01).epsilon(1e-15));
    }
    CHECK(sched.observe(1.0) == doctest::Approx(0.001).epsilon(1e-15));
}

TEST_CASE("sub-threshold improvement still counts as a plateau") {
    PlateauScheduler sched(0.1, 2, 10.0);
    sched.observe(1.0);
    sched.observe(1.0 - 5e-5);  // smaller than the 1e-4 margin
    sched.observe(1.0 - 9e-5);
    CHECK(sched.observe(1.0 - 9.9e-5) == doctest::Approx(0.01).epsilon(1e-15));
}

TEST_CASE("learning rate never drops below the floor") {
    PlateauScheduler sched(1e-5, 1, 10.0);
    sched.observe(1.0);
    for (int e = 0; e < 20; ++e) sched.observe(1.0);
    CHECK(sched.lr() == doctest::Approx(1e-6).epsilon(1e-12));
    for (int e = 0; e < 20; ++e) sched.observe(1.0);
    CHECK(sched.lr() == doctest::Approx(1e-6).epsilon(1e-12));
}

TEST_CASE("phantom seeds are disjoint across splits") {
    std::set<std::uint64_t> seen;
    for (int split : {1, 2, 3}) {
        for (int i = 0; i < 100; ++i) {
            CHECK(seen.insert(phantom_seed(7, split, i)).second);
        }
    }
    // and distinct run seeds never collide on the same slot
    CHECK(phantom_seed(7, 1, 0) != phantom_seed(8, 1, 0));
}

TEST_CASE("config validation") {
    TrainConfig ok = tiny_config();
    ok.validate();

    TrainConfig bad = ok;
    bad.lr0 = 0.0;
    CHECK_THROWS(bad.validate());
    bad = ok;
    bad.plateau_factor = 1.0;
    CHECK_THROWS(bad.validate());
    bad = ok;
    bad.plateau_patience = 0;
    CHECK_THROWS(bad.validate());
    bad = ok;
    bad.n_train = 0;
    CHECK_THROWS(bad.validate());
    bad = ok;
    bad.net.n_classes = 3;  // disagrees with the phantom's class count
    CHECK_THROWS(bad.validate());
}

TEST_CASE("a tiny run is reproducible bit for bit") {
    TrainConfig cfg = tiny_config();
    MetricReport a = train(cfg);
    MetricReport b = train(cfg);

    REQUIRE(a.curve.size() == b.curve.size());
    REQUIRE(a.curve.size() == 2);
    for (std::size_t i = 0; i < a.curve.size(); ++i) {
        CHECK(a.curve[i].train_loss == b.curve[i].train_loss);
        CHECK(a.curve[i].val_loss == b.curve[i].val_loss);
        CHECK(a.curve[i].lr == b.curve[i].lr);
    }
    REQUIRE(a.rows.size() == b.rows.size());
    // one row per test volume and class
    CHECK(a.rows.size() == static_cast<std::size_t>(cfg.n_test * cfg.net.n_classes));
    for (std::size_t i = 0; i < a.rows.size(); ++i) {
        CHECK(a.rows[i].vol_dice == b.rows[i].vol_dice);
        CHECK(a.rows[i].surf_dice == b.rows[i].surf_dice);
        CHECK(a.rows[i].vol_dice >= 0.0);
        CHECK(a.rows[i].vol_dice <= 1.0);
        CHECK(a.rows[i].tolerance == cfg.surface_tolerance);
    }
    CHECK(a.best_epoch == b.best_epoch);
    CHECK(a.best_val_loss == b.best_val_loss);
    CHECK(a.total_params == net_param_count(cfg.net));
    CHECK(a.seed == cfg.seed);

    // a different seed gives a genuinely different run
    TrainConfig other = cfg;
    other.seed = 8;
    MetricReport c = train(other);
    CHECK(c.curve[0].train_loss != a.curve[0].train_loss);
}

TEST_CASE("csv writers emit stable headers and full precision") {
    std::string dir = "/tmp/recal3d_train_test";
    std::filesystem::create_directories(dir);
    std::vector<MetricRow> rows = {{0, 1, 0.125, 1.0 / 3.0, 1.0}};
    write_metrics_csv(dir + "/m.csv", rows);
    std::ifstream in(dir + "/m.csv");
    std::string header, line;
    std::getline(in, header);
    std::getline(in, line);
    CHECK(header == "volume_id,class_id,vol_dice,surf_dice,tolerance");
    CHECK(line.find("0,1,0.125,0.333333333333333") == 0);

    std::vector<EpochStat> curve = {{1, 0.5, 0.25, 0.1}};
    write_losscurve_csv(dir + "/l.csv", curve);
    std::ifstream lin(dir + "/l.csv");
    std::getline(lin, header);
    CHECK(header == "epoch,train_loss,val_loss,lr");
    std::filesystem::remove_all(dir);
}
