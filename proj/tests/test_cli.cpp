#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "e2efs/e2efs.hpp"

#ifndef E2EFS_CLI_PATH
#error "E2EFS_CLI_PATH must be defined"
#endif

using namespace e2efs;
namespace fs = std::filesystem;

namespace {

int run_cli(const std::string& args) {
    const std::string cmd = std::string(E2EFS_CLI_PATH) + " " + args + " >cli_stdout.txt 2>cli_stderr.txt";
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

struct TempTree {
    fs::path root;
    explicit TempTree(const std::string& name) : root(name) {
        fs::remove_all(root);
        fs::create_directories(root);
    }
    ~TempTree() {
        fs::remove_all(root);
        fs::remove("cli_stdout.txt");
        fs::remove("cli_stderr.txt");
    }
    std::string operator/(const std::string& sub) const { return (root / sub).string(); }
};

}  // namespace

TEST_CASE("cli pipeline: synth -> train -> saliency -> select -> retrain -> eval") {
    TempTree tmp("cli_pipeline_tmp");
    const std::string common =
        " --set task=classification --set synth.examples=120 --set synth.frames=6"
        " --set synth.bands=16 --set synth.planted=1,4,7,9 --set synth.effect_size=1.5"
        " --set spec.filters=6 --set spec.lstm=6 --set spec.dense=8"
        " --set train.epochs=2 --set train.batch_size=10 --set ensemble.n=3"
        " --set ensemble.base_seed=42 --set select.n=4";

    REQUIRE(run_cli("synth --out " + (tmp / "data") + common + " --seed 5") == 0);
    REQUIRE(fs::exists(tmp.root / "data" / "manifest.csv"));
    REQUIRE(fs::exists(tmp.root / "data" / "config.snapshot"));

    const std::string with_data = common + " --set data.dir=" + (tmp / "data");
    REQUIRE(run_cli("train --out " + (tmp / "ens") + with_data) == 0);
    REQUIRE(fs::exists(tmp.root / "ens" / "manifest.txt"));
    REQUIRE(fs::exists(tmp.root / "ens" / "member_002.e2efs"));
    REQUIRE(fs::exists(tmp.root / "ens" / "training.log"));

    const std::string with_ens = with_data + " --set ensemble.dir=" + (tmp / "ens");
    REQUIRE(run_cli("saliency --out " + (tmp / "sal") + with_ens) == 0);
    REQUIRE(fs::exists(tmp.root / "sal" / "member_000_importance.csv"));
    REQUIRE(fs::exists(tmp.root / "sal" / "aggregate_importance.csv"));

    REQUIRE(run_cli("select --out " + (tmp / "sel") + with_ens + " --set select.origin=output_grad") == 0);
    REQUIRE(fs::exists(tmp.root / "sel" / "mask.txt"));
    REQUIRE(fs::exists(tmp.root / "sel" / "tally.csv"));
    const auto mask = load_mask(tmp / "sel/mask.txt");
    REQUIRE(mask.indices.size() == 4);

    const std::string with_mask = with_data + " --set mask.path=" + (tmp / "sel/mask.txt");
    REQUIRE(run_cli("retrain --out " + (tmp / "ens_sel") + with_mask) == 0);
    const auto reduced = load_ensemble(tmp / "ens_sel");
    REQUIRE(reduced.mask.has_value());
    REQUIRE(reduced.spec.branches[0].input_name == "selected");
    REQUIRE(reduced.spec.branches[0].input_bands == 4);

    REQUIRE(run_cli("eval --out " + (tmp / "metrics") + with_data +
                    " --set ensemble.dir=" + (tmp / "ens_sel") + " --set eval.split=dev") == 0);
    const std::string metrics = slurp(tmp.root / "metrics" / "metrics.csv");
    REQUIRE_THAT(metrics, Catch::Matchers::ContainsSubstring("uar,"));
}

TEST_CASE("cli fuse builds the two-branch middle-fusion shape") {
    TempTree tmp("cli_fuse_tmp");
    const std::string common =
        " --set task=classification --set synth.examples=100 --set synth.frames=6"
        " --set synth.bands=12 --set synth.planted=2,5 --set synth.effect_size=1.5"
        " --set spec.filters=5 --set spec.lstm=5 --set spec.dense=6"
        " --set train.epochs=1 --set train.batch_size=10 --set ensemble.n=2"
        " --set ensemble.base_seed=9 --set select.n=3";
    REQUIRE(run_cli("synth --out " + (tmp / "data") + common) == 0);
    const std::string with_data = common + " --set data.dir=" + (tmp / "data");
    REQUIRE(run_cli("train --out " + (tmp / "ens") + with_data) == 0);
    REQUIRE(run_cli("select --out " + (tmp / "sel") + with_data +
                    " --set ensemble.dir=" + (tmp / "ens")) == 0);
    REQUIRE(run_cli("fuse --out " + (tmp / "fused") + with_data +
                    " --set mask.path=" + (tmp / "sel/mask.txt")) == 0);
    const auto fused = load_ensemble(tmp / "fused");
    REQUIRE(fused.spec.branches.size() == 2);
    REQUIRE(fused.spec.branches[0].input_name == "spect");
    REQUIRE(fused.spec.branches[1].input_name == "selected");
    REQUIRE(fused.spec.branches[0].input_bands == 12);
    REQUIRE(fused.spec.branches[1].input_bands == 3);
    // both branches end in an lstm whose outputs feed the shared trunk
    REQUIRE(fused.spec.branches[0].layers.back().kind == LayerKind::lstm);
    REQUIRE(fused.spec.branches[1].layers.back().kind == LayerKind::lstm);
    REQUIRE(fused.mask.has_value());
}

TEST_CASE("cli exit codes: loss-gradient selection needs labels") {
    TempTree tmp("cli_exit_tmp");
    const std::string common =
        " --set task=classification --set synth.examples=60 --set synth.frames=5"
        " --set synth.bands=8 --set synth.planted=1 --set synth.effect_size=1.0"
        " --set spec.filters=4 --set spec.lstm=4 --set spec.dense=4"
        " --set train.epochs=1 --set train.batch_size=10 --set ensemble.n=2 --set select.n=2";
    REQUIRE(run_cli("synth --out " + (tmp / "data") + common) == 0);
    // strip the labels out of the manifest to make the dataset unlabeled
    {
        std::ifstream in(tmp.root / "data" / "manifest.csv");
        std::stringstream rewritten;
        std::string line;
        bool first = true;
        while (std::getline(in, line)) {
            if (!first) {
                // id,split,label,spect -> blank the third column
                const auto c1 = line.find(',');
                const auto c2 = line.find(',', c1 + 1);
                const auto c3 = line.find(',', c2 + 1);
                line = line.substr(0, c2 + 1) + line.substr(c3);
            }
            first = false;
            rewritten << line << "\n";
        }
        std::ofstream out(tmp.root / "data" / "manifest.csv", std::ios::binary);
        out << rewritten.str();
    }
    const std::string with_data = common + " --set data.dir=" + (tmp / "data");
    REQUIRE(run_cli("train --out " + (tmp / "ens") + with_data) == 2);  // training needs labels too
    // train on a labeled copy to get an ensemble, then select with loss source
    REQUIRE(run_cli("synth --out " + (tmp / "data2") + common) == 0);
    REQUIRE(run_cli("train --out " + (tmp / "ens2") + common + " --set data.dir=" + (tmp / "data2")) == 0);
    const int code = run_cli("select --out " + (tmp / "sel") + with_data +
                             " --set ensemble.dir=" + (tmp / "ens2") +
                             " --set select.origin=loss_grad");
    REQUIRE(code == 2);
    REQUIRE_THAT(slurp("cli_stderr.txt"), Catch::Matchers::ContainsSubstring("labels"));
}

TEST_CASE("cli exit codes: config errors") {
    TempTree tmp("cli_cfg_tmp");
    REQUIRE(run_cli("synth --out " + (tmp / "x") + " --set no.such.key=1") == 1);
    REQUIRE(run_cli("train --out " + (tmp / "y")) == 1);  // data.dir missing
    REQUIRE(run_cli("definitely-not-a-command") == 1);
}

TEST_CASE("cli reruns are byte-identical") {
    TempTree tmp("cli_rerun_tmp");
    const std::string common =
        " --set task=classification --set synth.examples=80 --set synth.frames=5"
        " --set synth.bands=10 --set synth.planted=1,3 --set synth.effect_size=1.2"
        " --set spec.filters=4 --set spec.lstm=4 --set spec.dense=5"
        " --set train.epochs=2 --set train.batch_size=10 --set ensemble.n=2"
        " --set ensemble.base_seed=77";
    REQUIRE(run_cli("synth --out " + (tmp / "data") + common) == 0);
    const std::string with_data = common + " --set data.dir=" + (tmp / "data");
    REQUIRE(run_cli("train --out " + (tmp / "e1") + with_data) == 0);
    REQUIRE(run_cli("train --out " + (tmp / "e2") + with_data + " --set ensemble.parallel=1") == 0);
    for (const std::string name : {"manifest.txt", "member_000.e2efs", "member_001.e2efs", "training.log"})
        REQUIRE(slurp(tmp.root / "e1" / name) == slurp(tmp.root / "e2" / name));

    REQUIRE(run_cli("eval --out " + (tmp / "m1") + with_data + " --set ensemble.dir=" + (tmp / "e1")) == 0);
    REQUIRE(run_cli("eval --out " + (tmp / "m2") + with_data + " --set ensemble.dir=" + (tmp / "e2")) == 0);
    REQUIRE(slurp(tmp.root / "m1" / "metrics.csv") == slurp(tmp.root / "m2" / "metrics.csv"));
}
