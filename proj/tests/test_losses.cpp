#include "doctest.h"
#include "support.hpp"

#include "dcr/losses.hpp"

#include <numbers>

using namespace dcr;
using namespace dcr::test;
using model::Mode;

namespace {

const double kLn2 = std::numbers::ln2;

Tensor column(std::initializer_list<double> v) {
  Matrix m(static_cast<Eigen::Index>(v.size()), 1);
  Eigen::Index r = 0;
  for (double x : v) m(r++, 0) = x;
  return Tensor::constant(m);
}

Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index r = 0;
  for (double x : v) out(r++) = x;
  return out;
}

// Direct evaluation of the weighted binary cross-entropy.
double bce_oracle(const Matrix& s, const Vector& y, const Vector& wp, const Vector& wn) {
  double total = 0.0;
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    const double p = 1.0 / (1.0 + std::exp(-s(r, 0)));
    total -= wp(r) * y(r) * std::log(p) + wn(r) * (1.0 - y(r)) * std::log(1.0 - p);
  }
  return total;
}

}  // namespace

TEST_CASE("bce examples") {
  CHECK(loss::bce(column({0.0}), vec({1})).item() == doctest::Approx(kLn2));
  const double sat = loss::bce(column({40.0}), vec({1})).item();
  CHECK(std::isfinite(sat));
  CHECK(sat < 1e-16);
  CHECK(loss::bce(column({0.0, 0.0}), vec({1, 0})).item() == doctest::Approx(2 * kLn2));
  CHECK(std::isfinite(loss::bce(column({1e4, -1e4}), vec({0, 1})).item()));
}

TEST_CASE("bce agrees with the direct formula") {
  std::mt19937_64 rng(1);
  const Matrix s = random_matrix(20, 1, rng, 3.0);
  Vector y(20), wp(20), wn(20);
  std::uniform_real_distribution<double> u(1.0, 5.0);
  for (Eigen::Index r = 0; r < 20; ++r) {
    y(r) = r % 3 == 0 ? 1.0 : 0.0;
    wp(r) = u(rng);
    wn(r) = u(rng);
  }
  CHECK(loss::bce(Tensor::constant(s), y).item() ==
        doctest::Approx(bce_oracle(s, y, Vector::Ones(20), Vector::Ones(20))).epsilon(1e-12));
  CHECK(loss::loss_interest_ipw(Tensor::constant(s), y, wp.cwiseInverse(), wn.cwiseInverse())
            .item() == doctest::Approx(bce_oracle(s, y, wp, wn)).epsilon(1e-12));
}

TEST_CASE("ipw loss examples") {
  std::mt19937_64 rng(2);
  const Tensor s = Tensor::constant(random_matrix(16, 1, rng, 2.0));
  Vector y(16);
  for (Eigen::Index r = 0; r < 16; ++r) y(r) = r % 2;
  const Vector ones = Vector::Ones(16);
  CHECK(loss::loss_interest_ipw(s, y, ones, ones).item() == loss::bce(s, y).item());
  CHECK(loss::loss_interest_ipw(column({0.0}), vec({1}), vec({0.5}), vec({1})).item() ==
        doctest::Approx(2 * kLn2));
  // counts [4,2,1], omega = 0.5: most popular weight 1, rarest weight 2
  const std::vector<std::int64_t> counts{4, 2, 1};
  const auto p = data::compute_propensities(counts, 0.5, 0.5, 1e-3);
  CHECK(1.0 / p.theta_pos[0] == doctest::Approx(1.0));
  CHECK(1.0 / p.theta_pos[2] == doctest::Approx(2.0));
  CHECK(loss::loss_interest_ipw(column({0.0, 0.0}), vec({1, 1}), vec({p.theta_pos[0], p.theta_pos[2]}),
                                vec({1, 1}))
            .item() == doctest::Approx(3 * kLn2));
  CHECK_THROWS(loss::loss_interest_ipw(column({0.0}), vec({1}), vec({1e-4}), vec({1})));
}

TEST_CASE("orthogonality loss") {
  Matrix a(3, 2), b(3, 2);
  a << 1, 0, 2, 3, 0, 0;
  b << 0, 5, 2, 3, 1, 1;
  const Tensor ta = Tensor::constant(a), tb = Tensor::constant(b);
  // rows: orthogonal, parallel, zero vector
  CHECK(std::abs(loss::loss_orthogonality(ta, tb).item() - 1.0 / 3.0) < 1e-12);
  CHECK(std::abs(loss::loss_orthogonality(ta, ag::scale(ta, -1.0)).item() - 2.0 / 3.0) < 1e-12);
  Matrix c(1, 2), d(1, 2);
  c << 1, 2;
  d << -2, 1;
  CHECK(std::abs(loss::loss_orthogonality(Tensor::constant(c), Tensor::constant(d)).item()) <
        1e-12);
  CHECK(std::abs(loss::loss_orthogonality(Tensor::constant(c), Tensor::constant(c)).item() - 1.0) <
        1e-12);
  std::mt19937_64 rng(3);
  const Matrix x = random_matrix(6, 4, rng), y = random_matrix(6, 4, rng);
  const double base = loss::loss_orthogonality(Tensor::constant(x), Tensor::constant(y)).item();
  const double scaled =
      loss::loss_orthogonality(Tensor::constant(x * 7.5), Tensor::constant(y * 0.01)).item();
  CHECK(scaled == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("bpr examples and the antisymmetry bound") {
  CHECK(loss::bpr_pairwise(column({1.5}), column({1.5})).item() == doctest::Approx(kLn2));
  CHECK(loss::bpr_pairwise(column({40.0}), column({0.0})).item() < 1e-16);
  for (double a = -6.0; a <= 6.0; a += 0.5) {
    for (double b = -6.0; b <= 6.0; b += 0.5) {
      const double s = loss::bpr_pairwise(column({a}), column({b})).item() +
                       loss::bpr_pairwise(column({b}), column({a})).item();
      if (a == b) {
        CHECK(s == doctest::Approx(2 * kLn2));
      } else {
        CHECK(s > 2 * kLn2);
      }
    }
  }
  CHECK(loss::bpr_pairwise(column({0.0}), column({0.0}), vec({4.0})).item() ==
        doctest::Approx(4 * kLn2));
}

TEST_CASE("every loss passes finite-difference checks") {
  std::mt19937_64 rng(4);
  Tensor s = Tensor::parameter(random_matrix(8, 1, rng, 2.0));
  Tensor t = Tensor::parameter(random_matrix(8, 1, rng, 2.0));
  Tensor a = Tensor::parameter(random_matrix(8, 5, rng));
  Tensor b = Tensor::parameter(random_matrix(8, 5, rng));
  const Vector y = vec({1, 0, 1, 0, 0, 1, 1, 0});
  const Vector tp = vec({1, 0.5, 0.25, 0.8, 0.1, 0.9, 0.3, 1});
  const Vector tn = vec({0.2, 1, 0.6, 0.5, 0.9, 0.05, 0.7, 0.4});
  const Vector w = vec({1, 2, 3, 4, 1, 1, 2, 0.5});
  constexpr double tol = 1e-4;
  CHECK(gradcheck([&] { return loss::bce(s, y); }, {s}).max_rel_error < tol);
  CHECK(gradcheck([&] { return loss::loss_interest_ipw(s, y, tp, tn); }, {s}).max_rel_error < tol);
  CHECK(gradcheck([&] { return loss::loss_orthogonality(a, b); }, {a, b}).max_rel_error < tol);
  CHECK(gradcheck([&] { return loss::bpr_pairwise(s, t, w); }, {s, t}).max_rel_error < tol);
}

TEST_CASE("loss_total combination") {
  loss::LossComponents p;
  p.main = column({1.0});
  p.interest = column({2.0});
  p.conformity = column({3.0});
  p.item = column({4.0});
  p.ortho_user = column({0.5});
  p.ortho_item = column({0.25});
  const auto total = [&](double al, double be, double ga, Mode m = Mode::dcr) {
    return loss::loss_total(p, {al, be, ga}, m).item();
  };
  CHECK(total(0, 0, 0) == 1.0);
  CHECK(total(0.1, 0.2, 0.4) == doctest::Approx(1.0 + 0.5 + 0.8 + 0.3));
  CHECK(total(0, 0, 2) - total(0, 0, 0) == doctest::Approx(2 * (total(0, 0, 1) - total(0, 0, 0))));
  for (double al : {0.0, 0.5, 1.0, 3.0}) {
    CHECK(total(al, 0.2, 0.4) ==
          doctest::Approx(total(0, 0.2, 0.4) + al * (total(1, 0.2, 0.4) - total(0, 0.2, 0.4))));
  }
  CHECK(total(5.0, 0.2, 0.4, Mode::var1) == doctest::Approx(total(0.0, 0.2, 0.4)));
  CHECK(total(5.0, 0.2, 0.4, Mode::var2) == doctest::Approx(total(5.0, 0.2, 0.4)));
}

TEST_CASE("compute_losses for every mode") {
  for (Mode mode : {Mode::dcr, Mode::var0, Mode::var1, Mode::var2, Mode::base_bce, Mode::base_bpr,
                    Mode::bias_tower, Mode::ipw_bce, Mode::ipw_bpr, Mode::macr}) {
    CAPTURE(model::mode_name(mode));
    model::RecModel m(small_config(mode, model::EncoderKind::recurrent));
    model::UserBatch b{{-1, 1, 2, 3, 4, 5}, 2, 3, {}};
    const std::vector<std::int64_t> rows{0, 1, 0, 1};
    const std::vector<std::int64_t> items{6, 7, 20, 21};
    const auto out = m.score(m.select_rows(m.user_states(b, false, {}), rows), m.item_states(items));
    loss::LabelledBatch lb;
    lb.labels = vec({1, 1, 0, 0});
    lb.theta_pos = vec({0.5, 1, 0.25, 0.1});
    lb.theta_neg = vec({0.9, 0.5, 0.8, 1});
    lb.pairs = 2;
    const auto c = loss::compute_losses(mode, out, lb, m.config().weights);
    REQUIRE(c.total.defined());
    CHECK(std::isfinite(c.total.item()));
    CHECK(c.main.item() >= 0.0);
    CHECK(c.interest.defined() == model::is_dcr_family(mode));
    CHECK(c.user.defined() == (mode == Mode::macr));
    if (mode == Mode::base_bce) {
      CHECK(c.main.item() == doctest::Approx(loss::bce(out.y_hat, lb.labels).item() / 4));
    }
    if (mode == Mode::ipw_bce) {
      CHECK(c.main.item() == doctest::Approx(bce_oracle(out.y_train.value(), lb.labels,
                                                        lb.theta_pos.cwiseInverse(),
                                                        lb.theta_neg.cwiseInverse()) /
                                             4));
    }
    if (model::is_dcr_family(mode)) {
      const auto& w = m.config().weights;
      const double alpha = mode == Mode::var1 ? 0.0 : w.alpha;
      CHECK(c.total.item() ==
            doctest::Approx(c.main.item() + alpha * (c.interest.item() + c.conformity.item()) +
                            w.beta * c.item.item() +
                            w.gamma * (c.ortho_user.item() + c.ortho_item.item())));
    }
    c.total.backward();
  }
}
