// tests/corpus_test.cpp

// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// THIS CODE IS PROVIDED *AS IS* BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
// KIND, EITHER EXPRESS OR IMPLIED, INCLUDING WITHOUT LIMITATION ANY IMPLIED
// WARRANTIES OR CONDITIONS OF TITLE, FITNESS FOR A PARTICULAR PURPOSE,
// MERCHANTABLITY OR NON-INFRINGEMENT.
// See the Apache 2 License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <sstream>

#include "dnnlab/corpus.hpp"
#include "dnnlab/network.hpp"

namespace dnnlab {
namespace {

CorpusSpec Small() {
  CorpusSpec s;
  s.utterances_per_split = 40;
  return s;
}

std::string Bytes(const Dataset &d) {
  std::ostringstream os;
  write_dataset(os, d);
  return os.str();
}

TEST(Generate, Deterministic) {
  const Corpus a = generate(Small()), b = generate(Small());
  EXPECT_EQ(Bytes(a.train), Bytes(b.train));
  EXPECT_EQ(Bytes(a.test), Bytes(b.test));
  CorpusSpec other = Small();
  other.seed = 2;
  EXPECT_NE(Bytes(generate(other).train), Bytes(a.train));
  EXPECT_NE(Bytes(a.train), Bytes(a.test));
}

TEST(Generate, ShapesAndMetadata) {
  const Corpus c = generate(Small());
  ASSERT_EQ(c.train.size(), 40u);
  for (const auto &u : c.train) {
    EXPECT_EQ(u.num_frames(), 40);
    EXPECT_EQ(u.dim(), 12);
    EXPECT_EQ(u.d_static, 12);
    EXPECT_EQ(u.class_count, 10);
    EXPECT_EQ(u.band, Band::kWide);
    EXPECT_EQ(u.condition_id, "clean");
    validate(u);
  }
  EXPECT_EQ(c.train[0].speaker_id, "train-spk00");
  EXPECT_EQ(c.test[9].speaker_id, "test-spk01");
}

TEST(Generate, LabelBalance) {
  const Corpus c = generate(CorpusSpec{});
  for (const Dataset *d : {&c.train, &c.test}) {
    std::vector<int> counts(10, 0);
    int total = 0;
    for (const auto &u : *d)
      for (int l : u.labels) ++counts[l], ++total;
    for (int k = 0; k < 10; ++k)
      EXPECT_NEAR(counts[k], total / 10.0, 0.1 * total / 10.0) << "class " << k;
  }
}

TEST(Generate, InvalidSpecs) {
  CorpusSpec s;
  s.classes = 1;
  EXPECT_THROW(generate(s), InvalidConfigError);
  s = CorpusSpec{};
  s.frames_per_utterance = 0;
  EXPECT_THROW(generate(s), InvalidConfigError);
  s = CorpusSpec{};
  s.coupling_strength = 1.5;
  EXPECT_THROW(generate(s), InvalidConfigError);
  s = CorpusSpec{};
  s.conditions = {{"n", std::numeric_limits<double>::infinity()}};
  EXPECT_THROW(generate(s), InvalidConfigError);
  EXPECT_THROW(corpus_spec_from_json(nlohmann::json::parse(R"({"classes":"ten"})")),
               InvalidConfigError);
}

// Softmax probe on a subset of static channels; returns test accuracy.
double ProbeAccuracy(const Corpus &c, int first, int count) {
  auto frames = [&](const Dataset &d) {
    FrameSet fs;
    int rows = 0;
    for (const auto &u : d) rows += u.num_frames();
    fs.inputs.resize(rows, count);
    int r = 0;
    for (const auto &u : d) {
      fs.inputs.middleRows(r, u.num_frames()) = u.frames.middleCols(first, count);
      r += u.num_frames();
      fs.labels.insert(fs.labels.end(), u.labels.begin(), u.labels.end());
    }
    fs.inputs.array() -= 3.0;  // common level
    return fs;
  };
  const FrameSet tr = frames(c.train), te = frames(c.test);
  TrainConfig cfg;
  cfg.learning_rate = 0.5;
  cfg.epochs = 15;
  const Network net =
      train(init_network({count, 32, c.train[0].class_count}, 1, 0.05), tr, cfg).network;
  return frame_accuracy(net, te);
}

TEST(Generate, UncoupledHighBandIsUninformative) {
  CorpusSpec s;
  s.coupling_strength = 0.0;
  s.speaker_distortion = 0.0;
  s.utterances_per_split = 100;
  const Corpus c = generate(s);
  EXPECT_LE(ProbeAccuracy(c, s.d_low, s.d_high), 1.0 / s.classes + 0.05);
  EXPECT_GT(ProbeAccuracy(c, 0, s.d_low), 0.5);
}

TEST(Generate, CoupledHighBandIsExactFunction) {
  CorpusSpec s;
  s.jitter = 0.0;
  s.speaker_distortion = 0.0;
  s.utterances_per_split = 2;
  const CorpusWorld w = make_world(s);
  const Corpus c = generate(s);
  for (const auto &u : c.train)
    for (int t = 0; t < u.num_frames(); ++t) {
      const Vector low = u.frames.row(t).head(s.d_low).transpose();
      EXPECT_LT((w.couple(low, s.level) - u.frames.row(t).tail(s.d_high).transpose())
                    .cwiseAbs()
                    .maxCoeff(),
                1e-12);
    }
}

TEST(Generate, MaskedDataLosesNoClassInformation) {
  CorpusSpec s;
  s.jitter = 0.0;
  s.speaker_distortion = 0.0;
  s.utterances_per_split = 60;
  const Corpus c = generate(s);
  FeatureSpec fs;
  fs.n_low = s.d_low;
  fs.n_high = s.d_high;
  TrainConfig cfg;
  cfg.learning_rate = 0.5;
  cfg.epochs = 20;
  auto accuracy = [&](const Dataset &tr, const Dataset &te) {
    FrameSet a = to_frames(tr, fs), b = to_frames(te, fs);
    a.inputs.array() -= s.level;
    b.inputs.array() -= s.level;
    return frame_accuracy(
        train(init_network({fs.input_dim(), 16, s.classes}, 1, 0.05), a, cfg).network, b);
  };
  const double full = accuracy(c.train, c.test);
  const double masked = accuracy(mask_dataset(c.train, fs), mask_dataset(c.test, fs));
  EXPECT_NEAR(masked, full, 0.02);
}

TEST(Noise, CleanIsInfiniteAndTenDbIsExact) {
  CorpusSpec clean = Small(), noisy = Small();
  noisy.conditions = {{"snr10", 10.0}};
  const Corpus a = generate(clean), b = generate(noisy);
  for (std::size_t i = 0; i < a.test.size(); ++i) {
    EXPECT_EQ(measured_snr_db(a.test[i], a.test[i]), std::numeric_limits<double>::infinity());
    const Matrix n = b.test[i].frames - a.test[i].frames;
    const double snr = 10.0 * std::log10(a.test[i].frames.array().square().mean() /
                                         n.array().square().mean());
    EXPECT_NEAR(snr, 10.0, 0.5);
    EXPECT_EQ(b.test[i].condition_id, "snr10");
    EXPECT_EQ(b.test[i].labels, a.test[i].labels);
  }
}

TEST(Noise, MultiConditionCycles) {
  CorpusSpec s = Small();
  s.conditions = {{"clean", std::nullopt}, {"snr15", 15.0}};
  const Corpus c = generate(s);
  EXPECT_EQ(c.train[0].condition_id, "clean");
  EXPECT_EQ(c.train[1].condition_id, "snr15");
}

TEST(SpecJson, RoundTripAndDefaults) {
  CorpusSpec s;
  s.classes = 7;
  s.conditions = {{"clean", std::nullopt}, {"snr10", 10.0}};
  s.seed = 0xfeedfacecafebeefull;
  const CorpusSpec back = corpus_spec_from_json(nlohmann::json::parse(corpus_spec_to_json(s).dump()));
  EXPECT_EQ(corpus_spec_to_json(back), corpus_spec_to_json(s));
  EXPECT_EQ(corpus_spec_from_json(nlohmann::json::object()).classes, 10);
}

TEST(DatasetIo, RoundTrip) {
  Corpus c = generate(Small());
  c.train[3].band = Band::kNarrow;
  c.train[4] = add_dynamics(c.train[4], 2);
  std::stringstream ss;
  write_dataset(ss, c.train);
  const Dataset back = read_dataset(ss);
  ASSERT_EQ(back.size(), c.train.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].speaker_id, c.train[i].speaker_id);
    EXPECT_EQ(back[i].condition_id, c.train[i].condition_id);
    EXPECT_EQ(back[i].band, c.train[i].band);
    EXPECT_EQ(back[i].labels, c.train[i].labels);
    EXPECT_EQ(back[i].d_static, c.train[i].d_static);
    EXPECT_LE((back[i].frames - c.train[i].frames).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(DatasetIo, EmptyDataset) {
  std::stringstream ss;
  write_dataset(ss, {});
  EXPECT_EQ(ss.str(), "");
  EXPECT_TRUE(read_dataset(ss).empty());
}

TEST(DatasetIo, TruncatedFileNamesLine) {
  const Corpus c = generate(Small());
  std::stringstream full;
  write_dataset(full, {c.train[0], c.train[1]});
  std::string text = full.str();
  // Keep header 1, its 40 frames, header 2 and 5 frames: line 48 is missing.
  std::size_t pos = 0;
  for (int i = 0; i < 47; ++i) pos = text.find('\n', pos) + 1;
  std::stringstream cut(text.substr(0, pos));
  try {
    read_dataset(cut);
    FAIL() << "expected parse error";
  } catch (const ParseError &e) {
    EXPECT_EQ(e.line(), 48u);
    EXPECT_NE(std::string(e.what()).find("line 48"), std::string::npos);
  }
}

TEST(DatasetIo, MalformedRows) {
  const std::string header =
      R"({"speaker_id":"s","condition_id":"c","band":"wide","T":2,"d_static":2,"class_count":3})";
  std::stringstream bad_num(header + "\n1,2,0\n1,x,1\n");
  try {
    read_dataset(bad_num);
    FAIL();
  } catch (const ParseError &e) {
    EXPECT_EQ(e.line(), 3u);
  }
  std::stringstream bad_label(header + "\n1,2,0\n1,2,7\n");
  EXPECT_THROW(read_dataset(bad_label), ParseError);
  std::stringstream bad_header("{not json\n");
  EXPECT_THROW(read_dataset(bad_header), ParseError);
}

TEST(DatasetIo, Files) {
  const auto dir = std::filesystem::temp_directory_path() / "dnnlab_corpus_test";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "d.txt").string();
  const Corpus c = generate(Small());
  save_dataset(c.test, path);
  EXPECT_EQ(load_dataset(path).size(), c.test.size());
  EXPECT_THROW(load_dataset((dir / "missing.txt").string()), IoError);
  EXPECT_THROW(save_dataset(c.test, (dir / "no/such/dir.txt").string()), IoError);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace dnnlab
