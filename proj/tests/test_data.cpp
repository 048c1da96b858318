#include <doctest.h>

#include <algorithm>
#include <fstream>
#include <set>

#include "fms/data.hpp"
#include "fms/errors.hpp"
#include "helpers.hpp"

using namespace fms;

namespace {

std::filesystem::path write_csv(const std::string& name, const std::string& body) {
  const auto dir = testing::scratch_dir("csv_" + name);
  const auto path = dir / "data.csv";
  std::ofstream(path) << body;
  return path;
}

bool disjoint(const FederatedDataset& ds) {
  std::set<ClientId> a(ds.train_client_ids.begin(), ds.train_client_ids.end());
  for (ClientId id : ds.eval_client_ids)
    if (a.count(id)) return false;
  return true;
}

}  // namespace

TEST_SUITE("data") {

TEST_CASE("synthetic generation is a pure function of its parameters") {
  SyntheticParams p;
  p.seed = 5;
  p.num_clients = 6;
  p.examples_per_client = 30;
  const FederatedDataset a = generate_synthetic(p);
  const FederatedDataset b = generate_synthetic(p);
  CHECK(a == b);
  p.seed = 6;
  CHECK_FALSE(a == generate_synthetic(p));
  CHECK_NOTHROW(a.validate());
  CHECK(a.clients.size() == 6);
  for (const auto& [id, c] : a.clients) {
    CHECK(c.train.size() == 24);
    CHECK(c.test.size() == 6);
    CHECK(c.weight() == c.train.size());
  }
}

TEST_CASE("heterogeneity 0 gives near-identical label mixes for two clients") {
  SyntheticParams p;
  p.seed = 17;
  p.num_clients = 2;
  p.examples_per_client = 1000;
  p.heterogeneity = 0.0;
  const FederatedDataset ds = generate_synthetic(p);
  std::vector<Example> a = ds.client({0}).train, b = ds.client({1}).train;
  a.insert(a.end(), ds.client({0}).test.begin(), ds.client({0}).test.end());
  b.insert(b.end(), ds.client({1}).test.begin(), ds.client({1}).test.end());
  CHECK(label_total_variation(a, b, p.num_classes) < 0.2);
}

TEST_CASE("high heterogeneity separates label mixes") {
  SyntheticParams p;
  p.seed = 17;
  p.num_clients = 2;
  p.examples_per_client = 1000;
  p.classes_per_client = 3;
  p.heterogeneity = 1.0;
  const FederatedDataset ds = generate_synthetic(p);
  CHECK(label_total_variation(ds.client({0}).train, ds.client({1}).train, p.num_classes) > 0.2);
}

TEST_CASE("one client: everything trains, nothing held out") {
  SyntheticParams p;
  p.num_clients = 1;
  const FederatedDataset ds = split_train_eval(generate_synthetic(p), 0.0, 1);
  CHECK(ds.train_client_ids.size() == 1);
  CHECK(ds.eval_client_ids.empty());
}

TEST_CASE("split_train_eval") {
  const FederatedDataset base = testing::small_dataset(10, 10, 2, 2, 3);
  SUBCASE("fraction 0 keeps every client in training") {
    const auto ds = split_train_eval(base, 0.0, 1);
    CHECK(ds.train_client_ids.size() == 10);
    CHECK(ds.eval_client_ids.empty());
  }
  SUBCASE("10 clients at 0.3 gives 3 disjoint eval clients") {
    const auto ds = split_train_eval(base, 0.3, 1);
    CHECK(ds.eval_client_ids.size() == 3);
    CHECK(ds.train_client_ids.size() == 7);
    CHECK(disjoint(ds));
    CHECK(std::is_sorted(ds.train_client_ids.begin(), ds.train_client_ids.end()));
    CHECK(std::is_sorted(ds.eval_client_ids.begin(), ds.eval_client_ids.end()));
    CHECK_NOTHROW(ds.validate());
  }
  SUBCASE("same seed, same partition") {
    CHECK(split_train_eval(base, 0.5, 9) == split_train_eval(base, 0.5, 9));
  }
  SUBCASE("fraction must be below 1") {
    CHECK_THROWS_AS(split_train_eval(base, 1.0, 1), ContractViolation);
  }
}

TEST_CASE("validate rejects overlapping populations") {
  FederatedDataset ds = testing::small_dataset(3, 10, 2, 2, 1);
  ds.eval_client_ids.push_back(ds.train_client_ids.front());
  CHECK_THROWS_AS(ds.validate(), ContractViolation);
}

TEST_CASE("test split sizes") {
  CHECK(test_count_for(0) == 0);
  CHECK(test_count_for(1) == 0);
  CHECK(test_count_for(2) == 1);
  CHECK(test_count_for(9) == 1);
  CHECK(test_count_for(100) == 20);
}

TEST_CASE("csv loading") {
  CsvSchema schema{2, 3, 0, false};

  SUBCASE("two rows for one client split into one train and one test example") {
    const auto path = write_csv("two", "0,1,0.5,1.5\n0,2,-1,2\n");
    const FederatedDataset ds = load_csv_dataset(path, schema);
    REQUIRE(ds.clients.size() == 1);
    CHECK(ds.client({0}).train.size() == 1);
    CHECK(ds.client({0}).test.size() == 1);
  }
  SUBCASE("comments, blank lines and a header are skipped") {
    const auto path = write_csv("hdr", "client,label,a,b\n# note\n\n3,0,1,1\n3,1,2,2\n5,2,0,0\n5,2,0,1\n");
    schema.has_header = true;
    const FederatedDataset ds = load_csv_dataset(path, schema);
    CHECK(ds.clients.size() == 2);
    CHECK(ds.train_client_ids == std::vector<ClientId>{{3}, {5}});
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_csv_dataset("/nonexistent/file.csv", schema), FileNotFoundError);
  }
  SUBCASE("label out of range names the row") {
    const auto path = write_csv("label", "0,1,0,0\n0,3,0,0\n");
    try {
      load_csv_dataset(path, schema);
      FAIL("expected schema error");
    } catch (const SchemaError& e) {
      CHECK(std::string(e.what()).find("row 2") != std::string::npos);
    }
  }
  SUBCASE("wrong feature count") {
    const auto path = write_csv("width", "0,1,0,0,0\n");
    CHECK_THROWS_AS(load_csv_dataset(path, schema), SchemaError);
  }
  SUBCASE("malformed number reports its line") {
    const auto path = write_csv("bad", "0,1,0,0\n0,1,x,0\n");
    try {
      load_csv_dataset(path, schema);
      FAIL("expected parse error");
    } catch (const ParseError& e) {
      CHECK(e.line() == 2);
    }
  }
  SUBCASE("same seed, same split") {
    const auto path = write_csv("seeded", "1,0,1,1\n1,1,2,2\n1,2,3,3\n1,0,4,4\n1,1,5,5\n");
    schema.seed = 4;
    CHECK(load_csv_dataset(path, schema) == load_csv_dataset(path, schema));
  }
}

TEST_CASE("summary counts") {
  const FederatedDataset ds = split_train_eval(testing::small_dataset(5, 20, 3, 4, 2), 0.4, 1);
  const DatasetSummary s = summarize(ds);
  CHECK(s.num_clients == 5);
  CHECK(s.train_clients == 3);
  CHECK(s.eval_clients == 2);
  CHECK(s.train_examples == 80);
  CHECK(s.test_examples == 20);
  std::size_t hist = 0;
  for (auto h : s.class_histogram) hist += h;
  CHECK(hist == 100);
}

}  // TEST_SUITE
