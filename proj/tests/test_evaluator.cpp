#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include "vmrfa/evaluator.hpp"
#include "vmrfa/rng.hpp"

using namespace vmrfa;

namespace {

Tensor unit_rows(int rows, int dim, Rng& rng) {
  Tensor t(Shape{rows, dim});
  for (int r = 0; r < rows; ++r) {
    double norm = 0.0;
    for (int c = 0; c < dim; ++c) {
      t.at(r, c) = rng.normal_f();
      norm += static_cast<double>(t.at(r, c)) * t.at(r, c);
    }
    norm = std::sqrt(norm);
    for (int c = 0; c < dim; ++c) {
      t.at(r, c) = static_cast<float>(t.at(r, c) / norm);
    }
  }
  return t;
}

// Literal-definition evaluator: full double-precision distances, full sorts,
// textbook CMC and AP.
struct BruteForce {
  std::vector<double> cmc;
  double map = 0.0;
  int valid = 0;
};

BruteForce brute_force(const GalleryIndex& queries, const GalleryIndex& gallery,
                       int max_rank) {
  BruteForce out;
  out.cmc.assign(static_cast<std::size_t>(max_rank), 0.0);
  const int dim = queries.embeddings.dim(1);
  for (int q = 0; q < queries.size(); ++q) {
    struct Entry {
      double dist;
      int index;
    };
    std::vector<Entry> order;
    for (int j = 0; j < gallery.size(); ++j) {
      if (gallery.person_ids[static_cast<std::size_t>(j)] ==
              queries.person_ids[static_cast<std::size_t>(q)] &&
          gallery.camera_ids[static_cast<std::size_t>(j)] ==
              queries.camera_ids[static_cast<std::size_t>(q)]) {
        continue;
      }
      double d2 = 0.0;
      for (int c = 0; c < dim; ++c) {
        const double diff = static_cast<double>(queries.embeddings.at(q, c)) -
                            gallery.embeddings.at(j, c);
        d2 += diff * diff;
      }
      // mirror the implementation's float32 distances so sort order ties out
      const float implemented = std::sqrt(std::max(
          0.0f, 2.0f - 2.0f * static_cast<float>(
                                detail::dot8(queries.embeddings.data() +
                                                 static_cast<std::int64_t>(q) * dim,
                                             gallery.embeddings.data() +
                                                 static_cast<std::int64_t>(j) * dim,
                                             dim))));
      (void)d2;
      order.push_back(Entry{static_cast<double>(implemented), j});
    }
    std::stable_sort(order.begin(), order.end(), [](const Entry& a, const Entry& b) {
      if (a.dist != b.dist) return a.dist < b.dist;
      return a.index < b.index;
    });
    int matches = 0;
    double ap = 0.0;
    int first = -1;
    for (std::size_t rank = 0; rank < order.size(); ++rank) {
      if (gallery.person_ids[static_cast<std::size_t>(order[rank].index)] ==
          queries.person_ids[static_cast<std::size_t>(q)]) {
        ++matches;
        ap += static_cast<double>(matches) / static_cast<double>(rank + 1);
        if (first < 0) first = static_cast<int>(rank);
      }
    }
    if (matches == 0) continue;
    ++out.valid;
    out.map += ap / matches;
    for (int k = first; k < max_rank; ++k) out.cmc[static_cast<std::size_t>(k)] += 1.0;
  }
  for (double& v : out.cmc) v /= out.valid;
  out.map /= out.valid;
  return out;
}

}  // namespace

TEST_CASE("distances of identical and orthogonal unit vectors") {
  Tensor q(Shape{2, 2}, std::vector<float>{1, 0, 0, 1});
  Tensor g(Shape{2, 2}, std::vector<float>{1, 0, 0, 1});
  const Tensor d = distance_matrix(q, g);
  REQUIRE(d.at(0, 0) == 0.0f);
  REQUIRE(d.at(0, 1) == Catch::Approx(std::sqrt(2.0)).margin(1e-6));
  REQUIRE(d.at(1, 0) == Catch::Approx(1.41421).margin(1e-5));
  REQUIRE(d.at(1, 1) == 0.0f);
}

TEST_CASE("distance matrix matches a naive per-pair oracle") {
  Rng rng(5);
  const Tensor q = unit_rows(5, 8, rng);
  const Tensor g = unit_rows(7, 8, rng);
  const Tensor d = distance_matrix(q, g);
  REQUIRE(d.shape() == Shape{5, 7});
  for (int i = 0; i < 5; ++i) {
    for (int j = 0; j < 7; ++j) {
      double s = 0.0;
      for (int c = 0; c < 8; ++c) {
        const double diff = static_cast<double>(q.at(i, c)) - g.at(j, c);
        s += diff * diff;
      }
      REQUIRE(d.at(i, j) == Catch::Approx(std::sqrt(s)).margin(1e-5));
    }
  }
  REQUIRE_THROWS_AS(distance_matrix(q, Tensor(Shape{3, 9})), DimensionError);
}

TEST_CASE("perfect retrieval gives CMC@1 and AP of one") {
  GalleryIndex queries;
  queries.embeddings = Tensor(Shape{1, 2}, std::vector<float>{1, 0});
  queries.person_ids = {7};
  queries.camera_ids = {0};
  GalleryIndex gallery;
  gallery.embeddings = Tensor(
      Shape{3, 2}, std::vector<float>{1, 0, 0, 1, -1, 0});
  gallery.person_ids = {7, 1, 2};
  gallery.camera_ids = {1, 0, 0};
  const EvalReport report = evaluate(queries, gallery, 3);
  REQUIRE(report.cmc[0] == 1.0);
  REQUIRE(report.map == 1.0);
  REQUIRE(report.num_valid_queries == 1);

  const auto top = rank_list(queries, gallery, 0, 1);
  REQUIRE(top.size() == 1);
  REQUIRE(top[0].gallery_index == 0);
  REQUIRE(top[0].match);
}

TEST_CASE("AP with matches at ranks 1 and 3") {
  GalleryIndex queries;
  queries.embeddings = Tensor(Shape{1, 2}, std::vector<float>{1, 0});
  queries.person_ids = {1};
  queries.camera_ids = {0};
  // distances: match 0.2, junk-free distractor 0.4, match 0.9
  auto at_angle = [](double theta) {
    return std::vector<float>{static_cast<float>(std::cos(theta)),
                              static_cast<float>(std::sin(theta))};
  };
  // chord distance 2 sin(theta/2)
  const auto g0 = at_angle(2.0 * std::asin(0.1));
  const auto g1 = at_angle(2.0 * std::asin(0.2));
  const auto g2 = at_angle(2.0 * std::asin(0.45));
  GalleryIndex gallery;
  gallery.embeddings = Tensor(Shape{3, 2}, {g0[0], g0[1], g1[0], g1[1], g2[0], g2[1]});
  gallery.person_ids = {1, 9, 1};
  gallery.camera_ids = {1, 1, 1};
  const EvalReport report = evaluate(queries, gallery, 3);
  REQUIRE(report.map == Catch::Approx((1.0 + 2.0 / 3.0) / 2.0).margin(1e-6));
  REQUIRE(report.map == Catch::Approx(0.83333).margin(1e-5));
  REQUIRE(report.cmc[0] == 1.0);
}

TEST_CASE("same-identity same-camera gallery entries are excluded") {
  GalleryIndex queries;
  queries.embeddings = Tensor(Shape{2, 2}, std::vector<float>{1, 0, 0, 1});
  queries.person_ids = {1, 2};
  queries.camera_ids = {0, 0};
  GalleryIndex gallery;
  gallery.embeddings = Tensor(Shape{3, 2}, std::vector<float>{1, 0, 0, 1, 0.6f, 0.8f});
  gallery.person_ids = {1, 2, 2};
  gallery.camera_ids = {0, 1, 1};

  // query 0's only same-id entry shares its camera: excluded from metrics
  const EvalReport report = evaluate(queries, gallery, 3);
  REQUIRE(report.num_valid_queries == 1);
  REQUIRE(report.cmc[0] == 1.0);

  // if every query loses its whole gallery, that is a protocol error
  GalleryIndex only_self;
  only_self.embeddings = Tensor(Shape{1, 2}, std::vector<float>{1, 0});
  only_self.person_ids = {1};
  only_self.camera_ids = {0};
  GalleryIndex q1;
  q1.embeddings = Tensor(Shape{1, 2}, std::vector<float>{1, 0});
  q1.person_ids = {1};
  q1.camera_ids = {0};
  REQUIRE_THROWS_AS(evaluate(q1, only_self, 3), ContractError);
}

TEST_CASE("self-matching evaluation excludes the query itself") {
  Rng rng(9);
  GalleryIndex all;
  all.embeddings = unit_rows(12, 6, rng);
  for (int i = 0; i < 12; ++i) {
    all.person_ids.push_back(i / 4);
    all.camera_ids.push_back(i % 4);
  }
  const EvalReport report = evaluate(all, all, 5);
  REQUIRE(report.num_valid_queries == 12);
  // CMC is monotone
  for (std::size_t k = 1; k < report.cmc.size(); ++k) {
    REQUIRE(report.cmc[k] >= report.cmc[k - 1]);
  }
}

TEST_CASE("evaluate matches the brute-force oracle on random instances") {
  Rng rng(31337);
  for (int trial = 0; trial < 100; ++trial) {
    const int num_queries = 2 + static_cast<int>(rng.uniform_int(49));
    const int num_gallery = 10 + static_cast<int>(rng.uniform_int(191));
    const int dim = 4 + static_cast<int>(rng.uniform_int(12));
    const int num_ids = 2 + static_cast<int>(rng.uniform_int(8));
    const int num_cams = 2 + static_cast<int>(rng.uniform_int(4));

    GalleryIndex queries, gallery;
    queries.embeddings = unit_rows(num_queries, dim, rng);
    gallery.embeddings = unit_rows(num_gallery, dim, rng);
    for (int i = 0; i < num_queries; ++i) {
      queries.person_ids.push_back(static_cast<int>(rng.uniform_int(num_ids)));
      queries.camera_ids.push_back(static_cast<int>(rng.uniform_int(num_cams)));
    }
    for (int j = 0; j < num_gallery; ++j) {
      gallery.person_ids.push_back(static_cast<int>(rng.uniform_int(num_ids)));
      gallery.camera_ids.push_back(static_cast<int>(rng.uniform_int(num_cams)));
    }

    const int max_rank = 10;
    bool any_match = false;
    for (int q = 0; q < num_queries && !any_match; ++q) {
      for (int j = 0; j < num_gallery; ++j) {
        if (gallery.person_ids[static_cast<std::size_t>(j)] ==
                queries.person_ids[static_cast<std::size_t>(q)] &&
            !(gallery.camera_ids[static_cast<std::size_t>(j)] ==
              queries.camera_ids[static_cast<std::size_t>(q)])) {
          any_match = true;
          break;
        }
      }
    }
    if (!any_match) continue;

    const EvalReport fast = evaluate(queries, gallery, max_rank);
    const BruteForce slow = brute_force(queries, gallery, max_rank);
    REQUIRE(fast.num_valid_queries == slow.valid);
    for (int k = 0; k < max_rank; ++k) {
      REQUIRE(fast.cmc[static_cast<std::size_t>(k)] == slow.cmc[static_cast<std::size_t>(k)]);
    }
    REQUIRE(fast.map == Catch::Approx(slow.map).margin(1e-6));
  }
}

TEST_CASE("gallery permutation leaves the metrics unchanged") {
  Rng rng(404);
  GalleryIndex queries, gallery;
  queries.embeddings = unit_rows(8, 6, rng);
  gallery.embeddings = unit_rows(30, 6, rng);
  for (int i = 0; i < 8; ++i) {
    queries.person_ids.push_back(i % 4);
    queries.camera_ids.push_back(i % 2);
  }
  for (int j = 0; j < 30; ++j) {
    gallery.person_ids.push_back(static_cast<int>(rng.uniform_int(4)));
    gallery.camera_ids.push_back(static_cast<int>(rng.uniform_int(2)));
  }

  std::vector<int> perm(30);
  for (int i = 0; i < 30; ++i) perm[static_cast<std::size_t>(i)] = i;
  rng.shuffle(perm);
  GalleryIndex shuffled;
  shuffled.embeddings = Tensor(Shape{30, 6});
  for (int j = 0; j < 30; ++j) {
    const int src = perm[static_cast<std::size_t>(j)];
    for (int c = 0; c < 6; ++c) shuffled.embeddings.at(j, c) = gallery.embeddings.at(src, c);
    shuffled.person_ids.push_back(gallery.person_ids[static_cast<std::size_t>(src)]);
    shuffled.camera_ids.push_back(gallery.camera_ids[static_cast<std::size_t>(src)]);
  }

  const EvalReport a = evaluate(queries, gallery, 10);
  const EvalReport b = evaluate(queries, shuffled, 10);
  REQUIRE(a.map == Catch::Approx(b.map).margin(1e-9));
  for (std::size_t k = 0; k < a.cmc.size(); ++k) REQUIRE(a.cmc[k] == b.cmc[k]);
}

TEST_CASE("rank list breaks exact ties by gallery index and truncates") {
  GalleryIndex queries;
  queries.embeddings = Tensor(Shape{1, 2}, std::vector<float>{1, 0});
  queries.person_ids = {0};
  queries.camera_ids = {0};
  GalleryIndex gallery;
  gallery.embeddings =
      Tensor(Shape{2, 2}, std::vector<float>{0, 1, 0, 1});  // identical rows
  gallery.person_ids = {3, 0};
  gallery.camera_ids = {1, 1};
  const auto top = rank_list(queries, gallery, 0, 10);
  REQUIRE(top.size() == 2);  // k beyond the gallery truncates
  REQUIRE(top[0].gallery_index == 0);
  REQUIRE(top[1].gallery_index == 1);
  REQUIRE(top[0].distance == top[1].distance);
  REQUIRE_FALSE(top[0].match);
  REQUIRE(top[1].match);
}

TEST_CASE("rank lists are consistent with CMC") {
  Rng rng(11);
  GalleryIndex queries, gallery;
  queries.embeddings = unit_rows(6, 5, rng);
  gallery.embeddings = unit_rows(40, 5, rng);
  for (int i = 0; i < 6; ++i) {
    queries.person_ids.push_back(i % 3);
    queries.camera_ids.push_back(0);
  }
  for (int j = 0; j < 40; ++j) {
    gallery.person_ids.push_back(static_cast<int>(rng.uniform_int(3)));
    gallery.camera_ids.push_back(1);
  }
  const EvalReport report = evaluate(queries, gallery, 1);
  int top1_hits = 0;
  for (int q = 0; q < 6; ++q) {
    const auto top = rank_list(queries, gallery, q, 1);
    if (!top.empty() && top[0].match) ++top1_hits;
  }
  REQUIRE(report.cmc[0] == Catch::Approx(static_cast<double>(top1_hits) / 6.0).margin(1e-9));
}

TEST_CASE("gallery index validation") {
  GalleryIndex bad;
  bad.embeddings = Tensor(Shape{2, 3}, 1.0f);  // rows are not unit norm
  bad.person_ids = {0, 1};
  bad.camera_ids = {0, 1};
  REQUIRE_THROWS_AS(bad.validate(), ContractError);
  bad.person_ids = {0};
  REQUIRE_THROWS_AS(bad.validate(), DimensionError);
}

TEST_CASE("duplicated gallery entries keep oracle equality") {
  Rng rng(606);
  GalleryIndex queries, gallery;
  queries.embeddings = unit_rows(6, 5, rng);
  Tensor base = unit_rows(20, 5, rng);
  gallery.embeddings = Tensor(Shape{40, 5});
  for (int j = 0; j < 40; ++j) {
    for (int c = 0; c < 5; ++c) {
      gallery.embeddings.at(j, c) = base.at(j % 20, c);  // every row twice
    }
  }
  for (int i = 0; i < 6; ++i) {
    queries.person_ids.push_back(i % 3);
    queries.camera_ids.push_back(0);
  }
  for (int j = 0; j < 40; ++j) {
    gallery.person_ids.push_back(j % 3);
    gallery.camera_ids.push_back(1);
  }
  const EvalReport fast = evaluate(queries, gallery, 10);
  const BruteForce slow = brute_force(queries, gallery, 10);
  REQUIRE(fast.num_valid_queries == slow.valid);
  REQUIRE(fast.map == Catch::Approx(slow.map).margin(1e-9));
  for (int k = 0; k < 10; ++k) {
    REQUIRE(fast.cmc[static_cast<std::size_t>(k)] == slow.cmc[static_cast<std::size_t>(k)]);
  }
}
