#include <gtest/gtest.h>

#include <fstream>
#include <map>
#include <set>

#include "iprls/task_data.hpp"
#include "test_util.hpp"

using namespace iprls;

namespace {

EncoderConfig enc(std::size_t max_len = 8, std::size_t vocab = 64) {
  EncoderConfig c;
  c.max_len = max_len;
  c.vocab_size = vocab;
  return c;
}

void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

/// Bag-of-words logistic regression trained with full-batch gradient descent.
class BowLogistic {
public:
  explicit BowLogistic(const std::vector<RawExample>& train) {
    std::vector<std::map<std::string, double>> feats;
    for (const auto& r : train) feats.push_back(bag(r.text));
    for (int it = 0; it < 200; ++it) {
      std::map<std::string, double> grad;
      double gb = 0.0;
      for (std::size_t i = 0; i < train.size(); ++i) {
        const double err = prob(feats[i]) - train[i].label;
        for (const auto& [w, x] : feats[i]) grad[w] += err * x;
        gb += err;
      }
      for (const auto& [w, g] : grad) weights_[w] -= 0.5 * g / static_cast<double>(train.size());
      bias_ -= 0.5 * gb / static_cast<double>(train.size());
    }
  }

  double accuracy(const std::vector<RawExample>& rows) const {
    std::size_t ok = 0;
    for (const auto& r : rows) ok += (prob(bag(r.text)) > 0.5 ? 1 : 0) == r.label ? 1 : 0;
    return static_cast<double>(ok) / static_cast<double>(rows.size());
  }

private:
  static std::map<std::string, double> bag(const std::string& text) {
    std::map<std::string, double> b;
    std::istringstream is(text);
    std::string w;
    while (is >> w) b[w] = 1.0;
    return b;
  }
  double prob(const std::map<std::string, double>& f) const {
    double z = bias_;
    for (const auto& [w, x] : f) {
      auto it = weights_.find(w);
      if (it != weights_.end()) z += it->second * x;
    }
    return 1.0 / (1.0 + std::exp(-z));
  }
  std::map<std::string, double> weights_;
  double bias_ = 0.0;
};

}  // namespace

TEST(Encode, EmptyTextIsClsThenPadding) {
  EXPECT_EQ(encode("", 4, 64), (std::vector<int>{kClsId, kPadId, kPadId, kPadId}));
  EXPECT_EQ(encode("   \t ", 3, 64), (std::vector<int>{kClsId, kPadId, kPadId}));
}

TEST(Encode, IdenticalWordsShareIdsAndCaseIsFolded) {
  const auto ids = encode("Good good GOOD bad", 6, 64);
  EXPECT_EQ(ids[0], kClsId);
  EXPECT_EQ(ids[1], ids[2]);
  EXPECT_EQ(ids[2], ids[3]);
  EXPECT_EQ(ids[5], kPadId);
  for (int i = 1; i <= 4; ++i) {
    EXPECT_GE(ids[i], kFirstWordId);
    EXPECT_LT(ids[i], 64);
  }
  EXPECT_EQ(ids[1], kFirstWordId + static_cast<int>(fnv1a("good") % (64 - kFirstWordId)));
}

TEST(Encode, TruncatesToMaxLength) {
  const auto ids = encode("a b c d e f g", 4, 64);
  EXPECT_EQ(ids.size(), 4u);
  EXPECT_EQ(ids, encode("a b c", 4, 64));
  EXPECT_THROW(encode("a", 0, 64), std::invalid_argument);
  EXPECT_THROW(encode("a", 4, 3), std::invalid_argument);
}

TEST(Fnv1a, KnownVectors) {
  EXPECT_EQ(fnv1a(""), 14695981039346656037ull);
  EXPECT_EQ(fnv1a("a"), 0xaf63dc4c8601ec8cull);
}

TEST(Synthetic, DeterministicForSeed) {
  const auto a = generate_synthetic_raw(3, 5, 0.5, 0.5, 50, 10, 20);
  const auto b = generate_synthetic_raw(3, 5, 0.5, 0.5, 50, 10, 20);
  const auto c = generate_synthetic_raw(3, 6, 0.5, 0.5, 50, 10, 20);
  ASSERT_EQ(a.size(), 3u);
  bool differs = false;
  for (std::size_t k = 0; k < 3; ++k) {
    ASSERT_EQ(a[k].train.size(), 50u);
    EXPECT_EQ(a[k].dev.size(), 10u);
    EXPECT_EQ(a[k].test.size(), 20u);
    EXPECT_EQ(a[k].name, b[k].name);
    for (std::size_t i = 0; i < 50; ++i) {
      EXPECT_EQ(a[k].train[i].text, b[k].train[i].text);
      differs = differs || a[k].train[i].text != c[k].train[i].text;
    }
  }
  EXPECT_TRUE(differs);
}

TEST(Synthetic, LabelsAreBalanced) {
  for (std::size_t n : {40u, 41u, 7u}) {
    const auto raw = generate_synthetic_raw(2, 9, 0.5, 0.5, n, n, n);
    for (const auto& t : raw) {
      for (const auto* split : {&t.train, &t.dev, &t.test}) {
        long pos = 0;
        for (const auto& r : *split) pos += r.label;
        EXPECT_LE(std::abs(2 * pos - static_cast<long>(split->size())), 1);
      }
    }
  }
}

TEST(Synthetic, RejectsBadParameters) {
  EXPECT_THROW(generate_synthetic_raw(2, 1, 1.5, 0.5, 10, 10, 10), std::invalid_argument);
  EXPECT_THROW(generate_synthetic_raw(2, 1, 0.5, -0.1, 10, 10, 10), std::invalid_argument);
}

TEST(Synthetic, EveryTaskIsLearnableByBagOfWords) {
  const auto raw = generate_synthetic_raw(5, 7, 0.5, 0.5, 1400, 200, 400);
  std::set<std::string> names;
  for (const auto& t : raw) {
    names.insert(t.name);
    EXPECT_GE(BowLogistic(t.train).accuracy(t.test), 0.9) << t.name;
  }
  EXPECT_EQ(names.size(), 5u);
}

TEST(Synthetic, EncodedStreamMatchesRawText) {
  const EncoderConfig c = enc(12, 256);
  const auto raw = generate_synthetic_raw(2, 3, 0.5, 0.5, 20, 5, 5);
  const TaskStream s = generate_synthetic_stream(2, 3, 0.5, 0.5, c, 20, 5, 5);
  ASSERT_EQ(s.size(), 2u);
  for (std::size_t k = 0; k < 2; ++k) {
    EXPECT_EQ(s.tasks[k].id, static_cast<int>(k) + 1);
    for (std::size_t i = 0; i < 20; ++i) {
      EXPECT_EQ(s.tasks[k].train[i], encode_example(raw[k].train[i], c));
      EXPECT_EQ(s.tasks[k].train[i].tokens.size(), 12u);
    }
  }
}

TEST(PermuteStream, RenumbersAndTracksOrder) {
  const TaskStream base = generate_synthetic_stream(3, 3, 0.5, 0.5, enc(), 10, 2, 2);
  const TaskStream p = permute_stream(base, {2, 0, 1});
  EXPECT_EQ(p.order, (std::vector<std::size_t>{2, 0, 1}));
  EXPECT_EQ(p.tasks[0].name, base.tasks[2].name);
  EXPECT_EQ(p.tasks[0].id, 1);
  EXPECT_EQ(p.tasks[0].train, base.tasks[2].train);
  const TaskStream pp = permute_stream(p, {1, 2, 0});
  EXPECT_EQ(pp.order, (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_THROW(permute_stream(base, {0, 0, 1}), std::invalid_argument);
  EXPECT_THROW(permute_stream(base, {0, 1}), std::invalid_argument);
  EXPECT_THROW(permute_stream(base, {0, 1, 3}), std::invalid_argument);
}

TEST(Tsv, TenLinesSplitSevenOneTwo) {
  const auto dir = test::temp_dir("tsv_split");
  std::string text;
  for (int i = 0; i < 10; ++i) text += std::to_string(i % 2) + "\tword" + std::to_string(i) + " other\n";
  write_file(dir / "books.tsv", text);
  const TaskSpec t = load_tsv_task(dir / "books.tsv", enc(), 13, 4);
  EXPECT_EQ(t.train.size(), 7u);
  EXPECT_EQ(t.dev.size(), 1u);
  EXPECT_EQ(t.test.size(), 2u);
  EXPECT_EQ(t.name, "books");
  EXPECT_EQ(t.id, 4);
  const TaskSpec again = load_tsv_task(dir / "books.tsv", enc(), 13, 4);
  EXPECT_EQ(t.train, again.train);
  EXPECT_EQ(t.test, again.test);
}

TEST(Tsv, RejectsBadLabelWithLineNumber) {
  const auto dir = test::temp_dir("tsv_bad");
  write_file(dir / "bad.tsv", "0\tfine\n\n2\tnope\n");
  try {
    read_tsv(dir / "bad.tsv");
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find(":3:"), std::string::npos) << e.what();
  }
  write_file(dir / "notab.tsv", "1 no tab here\n");
  EXPECT_THROW(read_tsv(dir / "notab.tsv"), DataError);
}

TEST(Tsv, EmptyOrMissingFileIsAnError) {
  const auto dir = test::temp_dir("tsv_empty");
  write_file(dir / "empty.tsv", "\n  \n");
  EXPECT_THROW(read_tsv(dir / "empty.tsv"), DataError);
  EXPECT_THROW(read_tsv(dir / "missing.tsv"), DataError);
}

TEST(Tsv, CarriageReturnsAreStripped) {
  const auto dir = test::temp_dir("tsv_crlf");
  write_file(dir / "crlf.tsv", "1\tgreat film\r\n0\tdull\r\n");
  const auto rows = read_tsv(dir / "crlf.tsv");
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].text, "great film");
  EXPECT_EQ(rows[1].label, 0);
}

TEST(Manifest, LoadsNamedAndRelativeEntries) {
  const auto dir = test::temp_dir("manifest");
  std::filesystem::create_directories(dir / "data");
  write_file(dir / "data" / "a.tsv", "1\tx\n0\ty\n1\tz\n");
  write_file(dir / "data" / "b.tsv", "0\tp\n1\tq\n");
  write_file(dir / "tasks.txt", "# stream\nfirst data/a.tsv\n\ndata/b.tsv  # unnamed\n");
  const TaskStream s = load_manifest(dir / "tasks.txt", enc(), 1);
  ASSERT_EQ(s.size(), 2u);
  EXPECT_EQ(s.tasks[0].name, "first");
  EXPECT_EQ(s.tasks[1].name, "b");
  EXPECT_EQ(s.tasks[1].id, 2);
  write_file(dir / "none.txt", "# nothing\n");
  EXPECT_THROW(load_manifest(dir / "none.txt", enc(), 1), DataError);
}

TEST(Tsv, WriteThenReadRoundTrips) {
  const auto dir = test::temp_dir("tsv_roundtrip");
  const std::vector<RawExample> rows{{"alpha beta", 1}, {"gamma", 0}};
  write_tsv(dir / "r.tsv", rows);
  const auto back = read_tsv(dir / "r.tsv");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].text, "alpha beta");
  EXPECT_EQ(back[0].label, 1);
  EXPECT_EQ(back[1].text, "gamma");
}

TEST(BuildStream, AppliesConfiguredOrder) {
  RunConfig cfg = test::small_run(3, 20);
  const TaskStream base = build_stream(cfg);
  cfg.stream.order = {1, 2, 0};
  const TaskStream s = build_stream(cfg);
  EXPECT_EQ(s.tasks[0].name, base.tasks[1].name);
  EXPECT_EQ(s.order, (std::vector<std::size_t>{1, 2, 0}));
}
