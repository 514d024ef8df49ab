#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "nerveseg/cli.hpp"
#include "nerveseg/data.hpp"

using namespace nerveseg;
namespace fs = std::filesystem;

namespace {

/// Redirects fd 1 into a file around a run_cli call.
struct CapturedRun {
    int exit_code = -1;
    std::string out;
};

CapturedRun run(const std::vector<std::string>& args) {
    const fs::path path = fs::temp_directory_path() / "nerveseg_cli_capture.txt";
    fflush(stdout);
    const int saved = dup(1);
    const int fd = open(path.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
    dup2(fd, 1);
    close(fd);

    CapturedRun result;
    result.exit_code = run_cli(args);

    fflush(stdout);
    dup2(saved, 1);
    close(saved);

    std::ifstream in(path);
    result.out.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    fs::remove(path);
    return result;
}

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / "nerveseg_cli_test";
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str(const std::string& sub) const { return (path / sub).string(); }
};

}  // namespace

TEST_CASE("rf reports the receptive-field anchors") {
    const CapturedRun plain = run({"rf", "--arch", "unet"});
    CHECK(plain.exit_code == 0);
    CHECK(plain.out.find("innermost receptive field: 68") != std::string::npos);
    CHECK(plain.out.find("covers input: no") != std::string::npos);

    const CapturedRun dilated =
        run({"rf", "--arch", "dilated", "--dilations", "2,4", "--input", "128"});
    CHECK(dilated.exit_code == 0);
    CHECK(dilated.out.find("innermost receptive field: 164") != std::string::npos);
    CHECK(dilated.out.find("covers input: yes") != std::string::npos);
}

TEST_CASE("usage errors exit 1") {
    CHECK(run({"train", "--arch", "unet"}).exit_code == 1);        // missing required flags
    CHECK(run({"rf", "--bogus-flag"}).exit_code == 1);             // unknown flag
    CHECK(run({"rf", "--arch", "resnet"}).exit_code == 1);         // bad value
    CHECK(run({}).exit_code == 1);                                 // no subcommand
}

TEST_CASE("runtime errors exit 2") {
    CHECK(run({"eval", "--ckpt", "/nonexistent.ck", "--data", "/nonexistent", "--subject", "1"})
              .exit_code == 2);
}

TEST_CASE("phantom generation is seeded and reloadable") {
    TempDir dir;
    const CapturedRun gen = run({"phantom", "--out", dir.str("data"), "--subjects", "3",
                                 "--per-subject", "2", "--seed", "5"});
    CHECK(gen.exit_code == 0);
    const auto subjects = load_dataset(dir.str("data"));
    REQUIRE(subjects.size() == 3);
    CHECK(subjects[0].samples.size() == 2);

    const CapturedRun again = run({"phantom", "--out", dir.str("data2"), "--subjects", "3",
                                   "--per-subject", "2", "--seed", "5"});
    CHECK(again.exit_code == 0);
    std::ifstream a(dir.str("data") + "/subject_1/images/frame_0000.pgm", std::ios::binary);
    std::ifstream b(dir.str("data2") + "/subject_1/images/frame_0000.pgm", std::ios::binary);
    std::string ba((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
    std::string bb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
    CHECK(ba == bb);
}

TEST_CASE("train, eval, predict pipeline on a small phantom set") {
    TempDir dir;
    REQUIRE(run({"phantom", "--out", dir.str("data"), "--subjects", "3", "--per-subject", "2",
                 "--seed", "3"})
                .exit_code == 0);

    const CapturedRun train =
        run({"train", "--data", dir.str("data"), "--arch", "dilated", "--test-subject", "1",
             "--val-subject", "2", "--epochs", "1", "--batch", "4", "--base-channels", "2",
             "--seed", "1", "--out", dir.str("model.ck"), "--history", dir.str("hist.jsonl")});
    CHECK(train.exit_code == 0);
    CHECK(train.out.find("epoch 1") != std::string::npos);
    CHECK(train.out.find("checkpoint written") != std::string::npos);
    CHECK(fs::exists(dir.str("model.ck")));
    CHECK(fs::exists(dir.str("hist.jsonl")));

    const CapturedRun eval = run(
        {"eval", "--ckpt", dir.str("model.ck"), "--data", dir.str("data"), "--subject", "1"});
    CHECK(eval.exit_code == 0);
    // one dice value, 4 decimals
    REQUIRE(eval.out.size() >= 7);
    CHECK(eval.out[1] == '.');
    CHECK(eval.out.find('\n') == 6);

    const CapturedRun predict =
        run({"predict", "--ckpt", dir.str("model.ck"), "--input",
             dir.str("data") + "/subject_1/images/frame_0000.pgm", "--out", dir.str("mask.pgm"),
             "--prob", dir.str("prob.pgm")});
    CHECK(predict.exit_code == 0);
    const GrayImage mask = read_pgm(dir.str("mask.pgm"));
    CHECK(mask.w == 128);
    for (uint8_t v : mask.pixels) CHECK((v == 0 || v == 255));
    const GrayImage prob = read_pgm(dir.str("prob.pgm"));
    CHECK(prob.pixels.size() == mask.pixels.size());
}

TEST_CASE("cv emits a deterministic report with the right shape") {
    TempDir dir;
    REQUIRE(run({"phantom", "--out", dir.str("data"), "--subjects", "3", "--per-subject", "2",
                 "--seed", "11"})
                .exit_code == 0);

    const CapturedRun cv =
        run({"cv", "--data", dir.str("data"), "--arch", "unet", "--seed", "9", "--epochs", "1",
             "--batch", "4", "--base-channels", "2", "--report", dir.str("report.csv")});
    CHECK(cv.exit_code == 0);

    std::ifstream in(dir.str("report.csv"));
    std::string csv((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    // header + 3 subject rows + 1 average row
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);
    CHECK(csv.rfind("subject,arch,mean_dice\n", 0) == 0);
    CHECK(csv.find("average,unet,") != std::string::npos);

    const CapturedRun cv2 =
        run({"cv", "--data", dir.str("data"), "--arch", "unet", "--seed", "9", "--epochs", "1",
             "--batch", "4", "--base-channels", "2", "--report", dir.str("report2.csv"),
             "--jobs", "2"});
    CHECK(cv2.exit_code == 0);
    std::ifstream in2(dir.str("report2.csv"));
    std::string csv2((std::istreambuf_iterator<char>(in2)), std::istreambuf_iterator<char>());
    CHECK(csv == csv2);
}

TEST_CASE("gradcheck subcommand passes") {
    const CapturedRun check = run({"gradcheck"});
    CHECK(check.exit_code == 0);
    CHECK(check.out.find("[PASS]") != std::string::npos);
    CHECK(check.out.find("[FAIL]") == std::string::npos);
}
