#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "founddiff/perception.hpp"

using namespace founddiff;
using namespace founddiff::perception;
using numcore::Tensor;

namespace {

// Literal translation of the ranking loss formula, including ties.
double rank_oracle(const std::vector<std::vector<double>>& e,
                   const std::vector<double>& y, double tau) {
  const int n = static_cast<int>(e.size());
  auto dot = [&](int i, int j) {
    double acc = 0.0;
    for (std::size_t k = 0; k < e[i].size(); ++k) acc += e[i][k] * e[j][k];
    return acc;
  };
  double total = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      const double num = std::exp(dot(i, j) / tau);
      double den = 0.0;
      for (int k = 0; k < n; ++k)
        if (k != i && std::abs(y[i] - y[k]) >= std::abs(y[i] - y[j]))
          den += std::exp(dot(i, k) / tau);
      total += -std::log(num / den);
    }
  return total / (static_cast<double>(n) * (n - 1));
}

// Literal translation of the anatomy discrimination loss, self excluded.
double anatomy_oracle(const std::vector<std::vector<double>>& e,
                      const std::vector<int>& y, double tau) {
  const int n = static_cast<int>(e.size());
  auto dot = [&](int i, int j) {
    double acc = 0.0;
    for (std::size_t k = 0; k < e[i].size(); ++k) acc += e[i][k] * e[j][k];
    return acc;
  };
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    std::vector<int> pos;
    for (int p = 0; p < n; ++p)
      if (p != i && y[p] == y[i]) pos.push_back(p);
    double term = 0.0;
    for (int p : pos) {
      double den = 0.0;
      for (int j = 0; j < n; ++j)
        if (j != i) den += std::exp(dot(i, j) / tau);
      term += std::log(std::exp(dot(i, p) / tau) / den);
    }
    total += -term / static_cast<double>(pos.size());
  }
  return total;
}

Tensor embedding_tensor(const std::vector<std::vector<double>>& rows) {
  const int n = static_cast<int>(rows.size());
  const int d = static_cast<int>(rows[0].size());
  std::vector<double> flat;
  for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
  return Tensor::from_values({n, d}, flat);
}

std::vector<std::vector<double>> random_unit_rows(int n, int d, Rng& rng) {
  std::vector<std::vector<double>> rows(n, std::vector<double>(d));
  for (auto& r : rows) {
    double norm = 0.0;
    for (auto& v : r) {
      v = rng.normal();
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (auto& v : r) v /= norm;
  }
  return rows;
}

}  // namespace

TEST_CASE("dose_score algebra") {
  const auto e_d = Tensor::from_values({1, 2}, {1.0, 0.0});
  {  // equal inner products
    auto a = Tensor::from_values({2}, {0.4, 0.3});
    auto b = Tensor::from_values({2}, {0.4, -0.9});
    REQUIRE(dose_score(e_d, a, b).item() == Catch::Approx(0.5).margin(1e-15));
  }
  {  // dots +1 / -1
    auto a = Tensor::from_values({2}, {1.0, 0.0});
    auto b = Tensor::from_values({2}, {-1.0, 0.0});
    REQUIRE(dose_score(e_d, a, b).item() ==
            Catch::Approx(1.0 / (1.0 + std::exp(-2.0))).margin(1e-12));
  }
  {  // complement property
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
      auto a = Tensor::from_values({2}, {rng.normal(), rng.normal()});
      auto b = Tensor::from_values({2}, {rng.normal(), rng.normal()});
      const double s = dose_score(e_d, a, b).item() + dose_score(e_d, b, a).item();
      REQUIRE(s == Catch::Approx(1.0).margin(1e-15));
    }
  }
  {  // strictly increasing in the clean inner product
    double prev = -1.0;
    for (double dc : {-1.0, -0.3, 0.2, 0.8, 1.5}) {
      auto a = Tensor::from_values({2}, {dc, 0.0});
      auto b = Tensor::from_values({2}, {0.1, 0.0});
      const double s = dose_score(e_d, a, b).item();
      REQUIRE(s > prev);
      prev = s;
    }
  }
}

TEST_CASE("loss_dose values and gradient") {
  auto zero = loss_dose(Tensor::from_values({3}, {0.1, 0.5, 0.9}),
                        Tensor::from_values({3}, {0.1, 0.5, 0.9}));
  REQUIRE(zero.item() == 0.0);

  auto quarter = loss_dose(Tensor::from_values({1}, {0.5}),
                           Tensor::from_values({1}, {0.25}));
  REQUIRE(quarter.item() == Catch::Approx(0.0625).margin(1e-15));

  Rng rng(3);
  std::vector<double> yv(6), tv(6);
  for (int i = 0; i < 6; ++i) {
    yv[i] = rng.uniform();
    tv[i] = rng.uniform();
  }
  auto target = Tensor::from_values({6}, tv);
  auto err = numcore::grad_check(
      [&](const std::vector<Tensor>& in) { return loss_dose(in[0], target); },
      {Tensor::from_values({6}, yv)});
  REQUIRE(err < 1e-6);
  // gradient equals 2(y_hat - y)/batch
  auto y_hat = Tensor::from_values({6}, yv, true);
  numcore::backward(loss_dose(y_hat, target));
  for (int i = 0; i < 6; ++i)
    REQUIRE(y_hat.grad()[i] == Catch::Approx(2.0 * (yv[i] - tv[i]) / 6.0).margin(1e-14));
}

TEST_CASE("loss_rank forced zero at 2N=2") {
  auto e = embedding_tensor({{1.0, 0.0}, {0.6, 0.8}});
  REQUIRE(loss_rank(e, {0.1, 0.5}, 0.7).item() == Catch::Approx(0.0).margin(1e-15));
}

TEST_CASE("loss_rank matches the brute-force oracle on the 2N=4 example") {
  const std::vector<std::vector<double>> rows{{1, 0}, {0, 1}, {-1, 0}, {0, -1}};
  const std::vector<double> labels{0.05, 0.10, 0.25, 0.50};
  const double expect = rank_oracle(rows, labels, 1.0);
  REQUIRE(std::abs(loss_rank(embedding_tensor(rows), labels, 1.0).item() - expect) < 1e-10);
}

TEST_CASE("loss_rank is invariant to label translation") {
  Rng rng(11);
  auto rows = random_unit_rows(6, 4, rng);
  // dyadic labels keep the distance comparisons exact under translation
  std::vector<double> labels{0.25, 0.5, 0.5, 1.0, 1.5, 1.75};
  const double base = loss_rank(embedding_tensor(rows), labels, 0.3).item();
  for (auto& l : labels) l += 16.0;
  REQUIRE(loss_rank(embedding_tensor(rows), labels, 0.3).item() ==
          Catch::Approx(base).margin(1e-12));
}

TEST_CASE("loss_rank oracle agreement on 50 random batches") {
  for (int trial = 0; trial < 50; ++trial) {
    Rng rng(2000 + trial);
    const int n = 4 + 2 * static_cast<int>(rng.uniform_index(3));  // 4, 6, 8
    const int d = 2 + static_cast<int>(rng.uniform_index(5));
    auto rows = random_unit_rows(n, d, rng);
    auto menu = ctsim::full_dose_menu();
    std::vector<double> labels(n);
    for (auto& l : labels) l = menu[rng.uniform_index(menu.size())];
    const double tau = rng.uniform(0.05, 1.0);
    const double expect = rank_oracle(rows, labels, tau);
    const double got = loss_rank(embedding_tensor(rows), labels, tau).item();
    REQUIRE(std::abs(got - expect) < 1e-10);
    REQUIRE(got >= -1e-12);
  }
}

TEST_CASE("loss_rank is invariant under global rotation of embeddings") {
  Rng rng(21);
  auto rows = random_unit_rows(6, 3, rng);
  const std::vector<double> labels{0.05, 0.1, 0.2, 0.25, 0.4, 0.5};
  const double base = loss_rank(embedding_tensor(rows), labels, 0.2).item();
  // rotate in the (0,1) and (1,2) planes
  for (auto [p, q, ang] : {std::tuple{0, 1, 0.7}, std::tuple{1, 2, -1.3}}) {
    const double c = std::cos(ang), s = std::sin(ang);
    for (auto& r : rows) {
      const double a = r[p], b = r[q];
      r[p] = c * a - s * b;
      r[q] = s * a + c * b;
    }
  }
  REQUIRE(loss_rank(embedding_tensor(rows), labels, 0.2).item() ==
          Catch::Approx(base).margin(1e-10));
}

TEST_CASE("loss_rank gradient passes the finite-difference check") {
  Rng rng(31);
  auto rows = random_unit_rows(6, 3, rng);
  const std::vector<double> labels{0.05, 0.1, 0.2, 0.25, 0.4, 0.5};
  auto err = numcore::grad_check(
      [&](const std::vector<Tensor>& in) {
        return loss_rank(numcore::l2norm_rows(in[0]), labels, 0.2);
      },
      {embedding_tensor(rows)});
  REQUIRE(err < 1e-6);
}

TEST_CASE("loss_anatomy zero for identical same-class pair") {
  auto e = embedding_tensor({{0.6, 0.8}, {0.6, 0.8}});
  REQUIRE(loss_anatomy(e, {1, 1}, 0.4).item() == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("loss_anatomy matches the brute-force oracle on small batches") {
  // smallest batch where every sample keeps a positive
  const std::vector<std::vector<double>> rows3{{1, 0}, {0, 1}, {-1, 0}};
  const std::vector<int> labels3{0, 0, 0};
  const double expect3 = anatomy_oracle(rows3, labels3, 1.0);
  REQUIRE(std::abs(loss_anatomy(embedding_tensor(rows3), labels3, 1.0).item() - expect3) < 1e-10);

  const std::vector<std::vector<double>> rows4{{1, 0}, {0, 1}, {-1, 0}, {0, -1}};
  const std::vector<int> labels4{0, 0, 1, 1};
  const double expect4 = anatomy_oracle(rows4, labels4, 1.0);
  REQUIRE(std::abs(loss_anatomy(embedding_tensor(rows4), labels4, 1.0).item() - expect4) < 1e-10);
}

TEST_CASE("loss_anatomy oracle agreement on 50 random batches") {
  for (int trial = 0; trial < 50; ++trial) {
    Rng rng(3000 + trial);
    const int pairs = 2 + static_cast<int>(rng.uniform_index(3));
    const int n = 2 * pairs;
    const int d = 2 + static_cast<int>(rng.uniform_index(5));
    auto rows = random_unit_rows(n, d, rng);
    std::vector<int> labels(n);
    for (int i = 0; i < pairs; ++i) {
      const int c = static_cast<int>(rng.uniform_index(3));
      labels[2 * i] = c;
      labels[2 * i + 1] = c;  // guarantees a positive for everyone
    }
    const double tau = rng.uniform(0.05, 1.0);
    const double expect = anatomy_oracle(rows, labels, tau);
    const double got = loss_anatomy(embedding_tensor(rows), labels, tau).item();
    REQUIRE(std::abs(got - expect) < 1e-10);
  }
}

TEST_CASE("loss_anatomy is invariant under batch permutation") {
  Rng rng(41);
  auto rows = random_unit_rows(6, 4, rng);
  std::vector<int> labels{0, 0, 1, 1, 2, 2};
  const double base = loss_anatomy(embedding_tensor(rows), labels, 0.3).item();
  std::vector<int> perm{3, 1, 5, 0, 2, 4};
  std::vector<std::vector<double>> prow;
  std::vector<int> plab;
  for (int i : perm) {
    prow.push_back(rows[i]);
    plab.push_back(labels[i]);
  }
  REQUIRE(loss_anatomy(embedding_tensor(prow), plab, 0.3).item() ==
          Catch::Approx(base).margin(1e-11));
}

TEST_CASE("loss_anatomy rejects batches with a positive-free sample") {
  auto e = embedding_tensor({{1, 0}, {0, 1}, {-1, 0}});
  REQUIRE_THROWS_WITH(loss_anatomy(e, {0, 1, 2}, 0.3),
                      Catch::Matchers::ContainsSubstring("no positive"));
}

TEST_CASE("encode contracts: determinism, unit norms, score range") {
  Rng rng(51);
  PerceptionModel model(PerceptionConfig{}, rng);
  auto ds = ctsim::make_dataset({ctsim::Family::chest}, {0.25}, 1, 32, 1e5, 3);
  auto a = encode_one(model, ds[0].ldct);
  auto b = encode_one(model, ds[0].ldct);
  REQUIRE(a.e_d.values() == b.e_d.values());
  REQUIRE(a.e_a.values() == b.e_a.values());
  REQUIRE(a.y_hat.item() == b.y_hat.item());

  auto norm = [](const std::vector<double>& v) {
    double acc = 0.0;
    for (double x : v) acc += x * x;
    return std::sqrt(acc);
  };
  REQUIRE(norm(a.e_d.values()) == Catch::Approx(1.0).margin(1e-6));
  REQUIRE(norm(a.e_a.values()) == Catch::Approx(1.0).margin(1e-6));
  REQUIRE(a.y_hat.item() > 0.0);
  REQUIRE(a.y_hat.item() < 1.0);

  // prompt vectors distinguishable at init
  REQUIRE(detail::cosine(model.e_clean().values(), model.e_noisy().values()) < 0.99);
}

TEST_CASE("loss_total equals the sum of its parts") {
  Rng rng(61);
  auto rows_d = random_unit_rows(4, 8, rng);
  auto rows_a = random_unit_rows(4, 8, rng);
  ContrastBatch cb;
  cb.dose_labels = {0.05, 0.05, 0.5, 0.5};
  cb.anatomy_labels = {0, 0, 2, 2};
  cb.tau = 0.25;
  cb.dose_embeddings = embedding_tensor(rows_d);
  cb.anat_embeddings = embedding_tensor(rows_a);
  cb.y_hat = Tensor::from_values({4}, {0.1, 0.2, 0.4, 0.45});
  auto total = loss_total(cb).item();
  auto target = Tensor::from_values({4}, cb.dose_labels);
  const double parts = loss_dose(cb.y_hat, target).item() +
                       loss_rank(cb.dose_embeddings, cb.dose_labels, cb.tau).item() +
                       loss_anatomy(cb.anat_embeddings, cb.anatomy_labels, cb.tau).item();
  REQUIRE(total == Catch::Approx(parts).margin(1e-12));
}

TEST_CASE("loss_total gradient wrt model parameters (sampled) on a 2N=4 batch") {
  Rng rng(71);
  PerceptionModel model(PerceptionConfig{.d_e = 8, .tau = 0.2}, rng);
  auto ds = ctsim::make_dataset({ctsim::Family::abdomen, ctsim::Family::head},
                                {0.5, 0.1}, 1, 16, 1e5, 9);
  REQUIRE(ds.size() == 4);

  auto fn = [&](const std::vector<Tensor>&) {
    ContrastBatch cb;
    cb.tau = model.config().tau;
    std::vector<Tensor> ed, ea, ys;
    for (const auto& s : ds) {
      auto out = encode_one(model, s.ldct);
      ed.push_back(out.e_d);
      ea.push_back(out.e_a);
      ys.push_back(out.y_hat);
      cb.dose_labels.push_back(s.y_d);
      cb.anatomy_labels.push_back(static_cast<int>(s.anatomy));
    }
    cb.dose_embeddings = numcore::concat_channels(ed);
    cb.anat_embeddings = numcore::concat_channels(ea);
    cb.y_hat = numcore::concat_channels(ys);
    return loss_total(cb);
  };

  auto err = numcore::grad_check_sampled(fn, model.params(), 1e-5, 25, 123);
  REQUIRE(err < 1e-4);
}

TEST_CASE("train_perception smoke run and determinism") {
  auto ds = ctsim::make_dataset({ctsim::Family::abdomen, ctsim::Family::chest},
                                {0.5, 0.1}, 2, 32, 1e5, 77);
  TrainPerceptionConfig tc;
  tc.epochs = 1;
  tc.batch_sources = 4;

  Rng r1(5);
  auto a = train_perception(PerceptionConfig{.d_e = 8}, tc, ds, r1);
  REQUIRE(a.epoch_loss.size() == 1);
  REQUIRE(std::isfinite(a.epoch_loss[0]));

  Rng r2(5);
  auto b = train_perception(PerceptionConfig{.d_e = 8}, tc, ds, r2);
  auto pa = a.model.named_params();
  auto pb = b.model.named_params();
  for (std::size_t i = 0; i < pa.size(); ++i)
    REQUIRE(pa[i].second.values() == pb[i].second.values());
}

TEST_CASE("eval_perception: nearest-centroid accuracy and error reporting") {
  Rng rng(81);
  PerceptionModel model(PerceptionConfig{.d_e = 8}, rng);
  // one sample per class: centroids equal the samples, accuracy 1
  auto ds = ctsim::make_dataset(
      {ctsim::Family::abdomen, ctsim::Family::chest, ctsim::Family::head},
      {0.5, 0.1}, 1, 32, 1e5, 13);
  auto ev = eval_perception(model, ds);
  REQUIRE(std::isfinite(ev.plcc));
  REQUIRE(std::isfinite(ev.srocc));

  std::vector<ctsim::CtSample> per_class{ds[0], ds[3], ds[4]};
  REQUIRE(eval_perception(model, per_class).anatomy_acc == 1.0);

  // identical images with distinct labels: constant predictions are an error
  std::vector<ctsim::CtSample> degenerate{ds[0], ds[0]};
  degenerate[1].y_d = 0.05;
  REQUIRE_THROWS_AS(eval_perception(model, degenerate), Error);
}

TEST_CASE("perception checkpoint round-trips through DACP format") {
  namespace fs = std::filesystem;
  Rng rng(91);
  PerceptionModel model(PerceptionConfig{.d_e = 8}, rng);
  const auto path = (fs::temp_directory_path() / "founddiff_dacp_test.bin").string();
  save_perception(model, path);
  auto loaded = load_perception(PerceptionConfig{.d_e = 8}, path);
  auto pa = model.named_params();
  auto pb = loaded.named_params();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    REQUIRE(pa[i].first == pb[i].first);
    for (std::size_t k = 0; k < pa[i].second.values().size(); ++k)
      REQUIRE(pb[i].second.values()[k] ==
              static_cast<double>(static_cast<float>(pa[i].second.values()[k])));
  }
  fs::remove(path);
}
