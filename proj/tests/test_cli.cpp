// SPDX-License-Identifier: Apache-2.0

#include "doctest.h"

#include <random>
#include <regex>
#include <sstream>

#include "embfuse/cli.hpp"
#include "embfuse/embstore.hpp"
#include "support.hpp"
#include "synthetic.hpp"

using namespace embfuse;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::filesystem::path fixture(const std::string& name) {
  return std::filesystem::path(EMBFUSE_FIXTURES) / name;
}

std::string p(const std::filesystem::path& path) { return path.string(); }

// Tag-balance check: every element closes in order, attributes are quoted.
bool well_formed_xml(const std::string& s) {
  std::vector<std::string> stack;
  std::size_t i = 0;
  bool root_seen = false;
  while ((i = s.find('<', i)) != std::string::npos) {
    const auto end = s.find('>', i);
    if (end == std::string::npos) return false;
    const std::string tag = s.substr(i + 1, end - i - 1);
    i = end + 1;
    if (tag.starts_with("?") || tag.starts_with("!")) continue;
    if (std::count(tag.begin(), tag.end(), '"') % 2) return false;
    if (tag.starts_with("/")) {
      if (stack.empty() || stack.back() != tag.substr(1)) return false;
      stack.pop_back();
      continue;
    }
    if (stack.empty() && root_seen) return false;
    root_seen = true;
    if (tag.ends_with("/")) continue;
    stack.push_back(tag.substr(0, tag.find_first_of(" \t\n")));
  }
  return root_seen && stack.empty();
}

std::size_t count_of(const std::string& s, const std::string& needle) {
  std::size_t n = 0;
  for (auto pos = s.find(needle); pos != std::string::npos; pos = s.find(needle, pos + 1)) ++n;
  return n;
}

// Numbers as they appear in a csv or md report, row by row.
std::vector<std::vector<std::string>> report_numbers(const std::string& text) {
  static const std::regex num(R"(\b\d\.\d{3}\b)");
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) {
    std::vector<std::string> nums;
    for (std::sregex_iterator it(line.begin(), line.end(), num), end; it != end; ++it)
      nums.push_back(it->str());
    if (!nums.empty()) rows.push_back(nums);
  }
  return rows;
}

// Synthetic experiment on disk: manifest, two EMBF files and a spec.
struct SweepFixture {
  testing::TempDir dir;
  std::filesystem::path spec;

  explicit SweepFixture(const std::string& extra = "") {
    const auto d = testing::make_xor_data(64, 4, 0.4, 9);
    testing::spit(dir / "manifest.csv", testing::manifest_csv(d.manifest));
    write_embeddings(dir / "a.embf", d.matrices[0]);
    write_embeddings(dir / "b.embf", d.matrices[1]);
    spec = dir / "spec.txt";
    testing::spit(spec,
                  "dataset = xor\n"
                  "manifest = manifest.csv\n"
                  "embedding.enc_a = a.embf\n"
                  "embedding.enc_b = b.embf\n"
                  "methods = concat, add\n"
                  "seeds = 1, 2\n"
                  "k_folds = 2\n"
                  "hidden_sizes = 4\n"
                  "learning_rates = 0.01\n"
                  "max_epochs = 20\n"
                  "output_dir = out\n" +
                      extra);
  }
};

}  // namespace

TEST_CASE("usage errors") {
  CHECK(cli({}).code == exit_code::kUsage);
  CHECK(cli({"bogus"}).code == exit_code::kUsage);
  CHECK(cli({"--help"}).code == exit_code::kOk);
  CHECK(cli({"report", "x.jsonl", "--format", "pdf"}).code == exit_code::kUsage);
  CHECK(cli({"--threads", "0", "report", "x.jsonl"}).code == exit_code::kUsage);
}

TEST_CASE("preprocess golden fixture") {
  testing::TempDir dir;
  const auto r = cli({"preprocess", "--in", p(fixture("preprocess_in.csv")), "--out", p(dir / "out.csv")});
  CHECK(r.code == exit_code::kOk);
  CHECK(r.out.find("5 rows") != std::string::npos);
  const auto expected = testing::slurp(fixture("preprocess_expected.csv"));
  CHECK(testing::slurp(dir / "out.csv") == expected);

  // Feeding the output back in only rewrites clean_text, to the same values.
  CHECK(cli({"preprocess", "--in", p(dir / "out.csv"), "--out", p(dir / "again.csv")}).code == 0);
  CHECK(testing::slurp(dir / "again.csv") == expected);
}

TEST_CASE("preprocess edge cases") {
  testing::TempDir dir;
  testing::spit(dir / "empty.csv", "");
  auto r = cli({"preprocess", "--in", p(dir / "empty.csv"), "--out", p(dir / "o.csv")});
  CHECK(r.code == exit_code::kOk);
  CHECK(testing::slurp(dir / "o.csv").empty());

  testing::spit(dir / "header.csv", "id,text,label,split\n");
  r = cli({"preprocess", "--in", p(dir / "header.csv"), "--out", p(dir / "o.csv")});
  CHECK(r.code == exit_code::kOk);
  CHECK(testing::slurp(dir / "o.csv") == "id,text,label,split,clean_text\n");

  testing::spit(dir / "ragged.csv", "id,text,label,split\na,hi,0,train\nb,oops,1\n");
  r = cli({"preprocess", "--in", p(dir / "ragged.csv"), "--out", p(dir / "o.csv")});
  CHECK(r.code == exit_code::kUsage);
  CHECK(r.err.find("row 2 (line 3)") != std::string::npos);

  testing::spit(dir / "notext.csv", "id,label\na,0\n");
  r = cli({"preprocess", "--in", p(dir / "notext.csv"), "--out", p(dir / "o.csv")});
  CHECK(r.code == exit_code::kUsage);
  CHECK(r.err.find("text") != std::string::npos);

  testing::spit(dir / "cfg.txt", "url_placeholder = [LINK]\n");
  testing::spit(dir / "one.csv", "id,text\na,see http://x.y now\n");
  r = cli({"--config", p(dir / "cfg.txt"), "preprocess", "--in", p(dir / "one.csv"), "--out", p(dir / "o.csv")});
  CHECK(r.code == exit_code::kOk);
  CHECK(testing::slurp(dir / "o.csv") == "id,text,clean_text\na,see http://x.y now,see [LINK] now\n");
}

TEST_CASE("fuse") {
  testing::TempDir dir;
  std::mt19937_64 gen(1);
  const auto a = testing::random_matrix(gen, "bert", 10, 4);
  const auto b = testing::random_matrix(gen, "hatebert", 10, 4);
  write_embeddings(dir / "a.embf", a);
  write_embeddings(dir / "b.embf", b);

  auto r = cli({"fuse", p(dir / "a.embf"), p(dir / "b.embf"), "--method", "concat", "--out", p(dir / "c.embf")});
  REQUIRE(r.code == exit_code::kOk);
  CHECK(r.out.find("bert hatebert concat: 10 x 8") != std::string::npos);
  const auto c = read_embeddings(dir / "c.embf");
  CHECK(c.rows() == 10);
  CHECK(c.dim() == 8);
  CHECK(c.model_id() == "bert hatebert concat");
  for (std::size_t i = 0; i < 10; ++i) {
    CHECK(std::equal(a.row(i).begin(), a.row(i).end(), c.row(i).begin()));
    CHECK(std::equal(b.row(i).begin(), b.row(i).end(), c.row(i).begin() + 4));
  }

  r = cli({"fuse", p(dir / "a.embf"), p(dir / "b.embf"), "--method", "randomlycombined", "--out", p(dir / "r.embf")});
  CHECK(r.code == exit_code::kUsage);
  CHECK(r.err.find("--seed") != std::string::npos);
  r = cli({"--seed", "5", "fuse", p(dir / "a.embf"), p(dir / "b.embf"), "--method", "randomlycombined", "--out",
           p(dir / "r.embf")});
  CHECK(r.code == exit_code::kOk);
  cli({"--seed", "5", "fuse", p(dir / "a.embf"), p(dir / "b.embf"), "--method", "randomlycombined", "--out",
       p(dir / "r2.embf")});
  CHECK(testing::slurp(dir / "r.embf") == testing::slurp(dir / "r2.embf"));

  // Same ids in another order still align; a different id set does not.
  std::vector<std::size_t> reversed;
  for (std::size_t i = 10; i-- > 0;) reversed.push_back(i);
  write_embeddings(dir / "rev.embf", b.select(reversed));
  r = cli({"fuse", p(dir / "a.embf"), p(dir / "rev.embf"), "--method", "add", "--out", p(dir / "s.embf")});
  CHECK(r.code == exit_code::kOk);
  const EmbeddingMatrix other("hatebert", testing::numbered_ids(10, "t"), 4,
                              std::vector<float>(b.values().begin(), b.values().end()));
  write_embeddings(dir / "other.embf", other);
  r = cli({"fuse", p(dir / "a.embf"), p(dir / "other.embf"), "--method", "add", "--out", p(dir / "x.embf")});
  CHECK(r.code == exit_code::kAlignment);

  r = cli({"fuse", p(dir / "a.embf"), "--method", "add", "--out", p(dir / "x.embf")});
  CHECK(r.code == exit_code::kUsage);
  r = cli({"fuse", p(dir / "a.embf"), p(dir / "b.embf"), "--method", "average", "--out", p(dir / "x.embf")});
  CHECK(r.code == exit_code::kUsage);
}

TEST_CASE("sweep, rerun and resume") {
  SweepFixture fx;
  auto r = cli({"sweep", p(fx.spec)});
  REQUIRE(r.code == exit_code::kOk);
  // 2 standalone + 2 methods, two seeds.
  CHECK(r.out.find("[8/8]") != std::string::npos);
  CHECK(r.out.find("0/8 cached, 8 computed, 0 failed") != std::string::npos);
  const auto md = testing::slurp(fx.dir / "out/summary.md");
  const auto csv = testing::slurp(fx.dir / "out/summary.csv");
  CHECK(md.find("### xor") == 0);
  const auto journal = testing::slurp(fx.dir / "runs.jsonl");

  r = cli({"sweep", p(fx.spec)});
  CHECK(r.code == exit_code::kOk);
  CHECK(r.out.find("8/8 cached") != std::string::npos);
  CHECK(r.out.find("(cached)") != std::string::npos);
  CHECK(testing::slurp(fx.dir / "out/summary.md") == md);

  // Interrupted run in a fresh folder, then resumed.
  SweepFixture again;
  r = cli({"sweep", p(again.spec), "--max-cells", "3"});
  CHECK(r.code == exit_code::kInterrupted);
  CHECK(r.err.find("rerun") != std::string::npos);
  r = cli({"--threads", "2", "sweep", p(again.spec)});
  CHECK(r.code == exit_code::kOk);
  CHECK(r.out.find("3/8 cached, 5 computed") != std::string::npos);
  CHECK(testing::slurp(again.dir / "runs.jsonl") == journal);
  CHECK(testing::slurp(again.dir / "out/summary.md") == md);
  CHECK(testing::slurp(again.dir / "out/summary.csv") == csv);
}

TEST_CASE("sweep failures") {
  SweepFixture bad("k_folds = 1\n");
  CHECK(cli({"sweep", p(bad.spec)}).code == exit_code::kUsage);
  CHECK(cli({"sweep", p(bad.dir / "missing.txt")}).code == exit_code::kUsage);

  // enc_b's file loses an id, and only enc_b cells are requested.
  SweepFixture broken("combinations = enc_b\n");
  const auto b = read_embeddings(broken.dir / "b.embf");
  std::vector<std::size_t> keep;
  for (std::size_t i = 1; i < b.rows(); ++i) keep.push_back(i);
  write_embeddings(broken.dir / "b.embf", b.select(keep));
  const auto r = cli({"sweep", p(broken.spec)});
  CHECK(r.code == exit_code::kAllFailed);
  CHECK(r.out.find("FAILED") != std::string::npos);
  CHECK(r.err.find("x0") != std::string::npos);
}

TEST_CASE("report on the published table") {
  const auto journal = p(fixture("dynahate_table3.jsonl"));
  const auto md = cli({"report", journal});
  REQUIRE(md.code == exit_code::kOk);
  std::istringstream lines(md.out);
  std::string header, rule, first;
  std::getline(lines, header);
  std::getline(lines, rule);
  std::getline(lines, first);
  CHECK(header == "| Embedding Combination | Accuracy | Macro F1 |");
  CHECK(first == "| bert bertweet hatebert interleaved | 0.716 | 0.710 |");

  const auto rows = report_numbers(md.out);
  REQUIRE(rows.size() == 23);
  for (std::size_t i = 1; i < rows.size(); ++i) CHECK(std::stod(rows[i - 1][0]) >= std::stod(rows[i][0]));

  const auto csv = cli({"report", journal, "--format", "csv"});
  CHECK(csv.code == exit_code::kOk);
  CHECK(report_numbers(csv.out) == rows);
  CHECK(csv.out.rfind("combination,accuracy,macro_f1\n", 0) == 0);

  const auto svg = cli({"report", journal, "--format", "svg", "--title", "DynaHate"});
  CHECK(svg.code == exit_code::kOk);
  CHECK(well_formed_xml(svg.out));
  CHECK(count_of(svg.out, "<g class=\"combination\"") == 23);
  CHECK(count_of(svg.out, "class=\"bar accuracy\"") == 23);
  CHECK(count_of(svg.out, "class=\"bar macro-f1\"") == 23);
  CHECK(svg.out.find("bert bertweet hatebert interleaved") != std::string::npos);

  testing::TempDir dir;
  CHECK(cli({"report", journal, "--out", p(dir / "t.md")}).code == exit_code::kOk);
  CHECK(testing::slurp(dir / "t.md") == md.out);
}

TEST_CASE("report errors") {
  testing::TempDir dir;
  testing::spit(dir / "empty.jsonl", "");
  CHECK(cli({"report", p(dir / "empty.jsonl")}).code == exit_code::kEmptyReport);
  testing::spit(dir / "failed.jsonl", R"({"schema":1,"kind":"cell","combination":"bert","seed":3,"status":"error","error":"x"})"
                                      "\n");
  CHECK(cli({"report", p(dir / "failed.jsonl")}).code == exit_code::kEmptyReport);
  CHECK(cli({"report", p(dir / "nope.jsonl")}).code == exit_code::kUsage);
  testing::spit(dir / "garbage.jsonl", "not json\n");
  CHECK(cli({"report", p(dir / "garbage.jsonl")}).code == exit_code::kUsage);
}

TEST_CASE("extract-check") {
  testing::TempDir dir;
  std::mt19937_64 gen(2);
  const auto m = testing::random_matrix(gen, "bert", 10, 768);
  write_embeddings(dir / "bert.embf", m);
  std::string manifest = "id,text,label,split\n";
  for (const auto& id : m.sample_ids()) manifest += id + ",text " + id + ",0,train\n";
  testing::spit(dir / "manifest.csv", manifest);

  auto r = cli({"extract-check", p(dir / "bert.embf"), "--manifest", p(dir / "manifest.csv"), "--expect-dim", "768"});
  CHECK(r.code == exit_code::kOk);
  CHECK(r.out.find("ok, model=bert rows=10 dim=768") != std::string::npos);

  CHECK(cli({"extract-check", p(dir / "bert.embf"), "--expect-dim", "512"}).code == exit_code::kUsage);

  const auto bytes = testing::slurp(dir / "bert.embf");
  testing::spit(dir / "short.embf", bytes.substr(0, bytes.size() - 100));
  r = cli({"extract-check", p(dir / "short.embf")});
  CHECK(r.code == exit_code::kUsage);
  CHECK(r.err.find("checksum failure") != std::string::npos);

  std::string swapped = "id,text,label,split\n";
  for (std::size_t i = 0; i < 10; ++i) swapped += (i == 4 ? std::string("zz") : m.sample_ids()[i]) + ",t,0,train\n";
  testing::spit(dir / "swapped.csv", swapped);
  r = cli({"extract-check", p(dir / "bert.embf"), "--manifest", p(dir / "swapped.csv")});
  CHECK(r.code == exit_code::kAlignment);
  CHECK(r.err.find("'s4'") != std::string::npos);

  testing::spit(dir / "longer.csv", manifest + "extra,t,0,train\n");
  r = cli({"extract-check", p(dir / "bert.embf"), "--manifest", p(dir / "longer.csv")});
  CHECK(r.code == exit_code::kAlignment);
  CHECK(r.err.find("first unmatched id: extra") != std::string::npos);

  auto values = std::vector<float>(m.values().begin(), m.values().end());
  values[768 * 3 + 5] = 1.5f;
  write_embeddings(dir / "wide.embf", EmbeddingMatrix("bert", m.sample_ids(), 768, values));
  r = cli({"extract-check", p(dir / "wide.embf")});
  CHECK(r.code == exit_code::kUsage);
  CHECK(r.err.find("'s3'") != std::string::npos);
  CHECK(cli({"extract-check", p(dir / "wide.embf"), "--no-range-check"}).code == exit_code::kOk);
}

TEST_CASE("train and predict") {
  SweepFixture fx;
  const auto model = p(fx.dir / "m.mlpf");
  auto r = cli({"--seed", "1", "train", p(fx.dir / "a.embf"), p(fx.dir / "b.embf"), "--method", "concat",
                "--manifest", p(fx.dir / "manifest.csv"), "--hidden", "8", "--lr", "0.01", "--out", model});
  REQUIRE(r.code == exit_code::kOk);
  CHECK(r.out.find("trained enc_a enc_b concat") != std::string::npos);
  r = cli({"predict", p(fx.dir / "a.embf"), p(fx.dir / "b.embf"), "--method", "concat", "--model", model,
           "--manifest", p(fx.dir / "manifest.csv")});
  CHECK(r.code == exit_code::kOk);
  CHECK(r.out.find("n=32") != std::string::npos);
  r = cli({"predict", p(fx.dir / "a.embf"), "--model", model, "--manifest", p(fx.dir / "manifest.csv")});
  CHECK(r.code == exit_code::kUsage);  // 4 columns against an 8 column model
}
