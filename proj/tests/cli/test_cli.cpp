#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <string>
#include <sys/wait.h>

#include "lenspsych/io_util.hpp"
#include "support/temp_dir.hpp"

namespace fs = std::filesystem;

namespace {

int run(const std::string& args) {
  const std::string cmd = std::string(LENSPSYCH_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

struct Fixture {
  test_support::TempDir dir;
  Fixture() { REQUIRE(run("make-toy --fixture --out-dir " + q(dir.path())) == 0); }
  fs::path config() const { return dir.path() / "config.json"; }
};

}  // namespace

TEST_CASE("commands succeed on the shipped toy fixture") {
  Fixture f;
  CHECK(run("surprisal --config " + q(f.config()) + " --lens logit") == 0);
  CHECK(run("fit-lens --config " + q(f.config())) == 0);
  CHECK(run("evaluate --config " + q(f.config())) == 0);
  CHECK(run("report --config " + q(f.config()) + " --workers 2") == 0);
  CHECK(fs::exists(f.dir.path() / "out" / "report" / "table1.tsv"));
  CHECK(run("validate-bundle " + q(f.dir.path() / "models" / "toy-m")) == 0);
  CHECK(run("ngram-train --corpus " + q(f.dir.path() / "bigram_corpus.txt") + " --out-dir " +
            q(f.dir.path() / "lm") + " --smoothing add_k") == 0);
  CHECK(fs::exists(f.dir.path() / "lm" / "bigrams.tsv"));
}

TEST_CASE("--out-dir and --seed override the config") {
  Fixture f;
  const auto other = f.dir.path() / "elsewhere";
  CHECK(run("surprisal --config " + q(f.config()) + " --lens logit --seed 3 --out-dir " + q(other)) == 0);
  CHECK(fs::exists(other / "surprisal" / "toy-s"));
  CHECK_FALSE(fs::exists(f.dir.path() / "out"));
}

TEST_CASE("configuration errors exit with 2") {
  Fixture f;
  CHECK(run("evaluate --config " + q(f.dir.path() / "missing.json")) == 2);
  CHECK(run("evaluate --config " + q(f.config()) + " --lens sideways") == 2);
  CHECK(run("evaluate --config " + q(f.config()) + " --clause-final maybe") == 2);
  CHECK(run("report --config " + q(f.config()) + " --workers 0") == 2);
  CHECK(run("evaluate") == 2);
  CHECK(run("no-such-command") == 2);

  auto text = lenspsych::read_file(f.config());
  text.insert(1, "\"colour\": \"blue\", ");
  lenspsych::write_file_atomic(f.dir.path() / "bad.json", text);
  CHECK(run("report --config " + q(f.dir.path() / "bad.json")) == 2);

  const std::string env = std::string("LENSPSYCH_WORKERS=lots ") + LENSPSYCH_CLI + " evaluate --config " +
                          q(f.config()) + " >/dev/null 2>&1";
  const int status = std::system(env.c_str());
  CHECK(WEXITSTATUS(status) == 2);
}

TEST_CASE("tuned lens without translators exits with 2") {
  Fixture f;
  const std::string cfg = R"({"models": [{"id": "toy-m", "bundle": "models/toy-m"}],
    "datasets": [{"id": "spr", "path": "reading_spr.tsv"}], "lens": "tuned"})";
  lenspsych::write_file_atomic(f.dir.path() / "tuned.json", cfg);
  CHECK(run("surprisal --config " + q(f.dir.path() / "tuned.json")) == 2);
}

TEST_CASE("data errors exit with 1") {
  Fixture f;
  std::ofstream(f.dir.path() / "reading_spr.tsv", std::ios::app) << "s1\t0\tOther\tSPR\tfast\t\t\t\t\n";
  CHECK(run("evaluate --config " + q(f.config())) == 1);

  Fixture g;
  fs::resize_file(g.dir.path() / "models" / "toy-m" / "tensors.bin", 64);
  CHECK(run("validate-bundle " + q(g.dir.path() / "models" / "toy-m")) == 1);
  CHECK(run("surprisal --config " + q(g.config()) + " --lens logit") == 1);
}
