#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "langneck/tensor.hpp"

using namespace langneck;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, double sigma = 1.0, bool rg = false) {
    Rng rng(seed);
    return Tensor::randn(std::move(shape), rng, sigma, rg);
}

// Brute-force triple-loop product, the independent matmul reference.
std::vector<double> matmul_reference(const Tensor& a, const Tensor& b) {
    std::vector<double> c(a.rows() * b.cols(), 0.0);
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.cols(); ++j)
            for (std::size_t l = 0; l < a.cols(); ++l)
                c[i * b.cols() + j] += a.at(i, l) * b.at(l, j);
    return c;
}

}  // namespace

TEST_CASE("matmul identity and zero") {
    Tensor eye({3, 3}, 0.0);
    for (int i = 0; i < 3; ++i) eye.data()[i * 3 + i] = 1.0;
    Tensor b = random_tensor({3, 4}, 11);
    Tensor prod = matmul(eye, b);
    for (std::size_t i = 0; i < b.size(); ++i) REQUIRE(prod.data()[i] == b.data()[i]);

    Tensor zero({4, 3}, 0.0);
    Tensor az = matmul(b, zero);
    for (double v : az.data()) REQUIRE(v == 0.0);
}

TEST_CASE("matmul matches triple-loop reference") {
    Tensor a = random_tensor({4, 5}, 1);
    Tensor b = random_tensor({5, 3}, 2);
    Tensor c = matmul(a, b);
    auto ref = matmul_reference(a, b);
    for (std::size_t i = 0; i < ref.size(); ++i)
        REQUIRE(std::fabs(c.data()[i] - ref[i]) < 1e-12);
}

TEST_CASE("matmul shape mismatch throws") {
    REQUIRE_THROWS_AS(matmul(random_tensor({2, 3}, 1), random_tensor({4, 2}, 2)), DimError);
}

TEST_CASE("matmul associativity against reference") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(derive_seed(seed, "assoc"));
        auto dim = [&] { return 1 + rng.below(8); };
        std::size_t m = dim(), k = dim(), p = dim(), q = dim();
        Tensor a = random_tensor({m, k}, seed * 3 + 1);
        Tensor b = random_tensor({k, p}, seed * 3 + 2);
        Tensor c = random_tensor({p, q}, seed * 3 + 3);
        Tensor lhs = matmul(matmul(a, b), c);
        Tensor rhs = matmul(a, matmul(b, c));
        for (std::size_t i = 0; i < lhs.size(); ++i)
            REQUIRE(std::fabs(lhs.data()[i] - rhs.data()[i]) < 1e-9);
    }
}

TEST_CASE("softmax symmetry and analytic values") {
    Tensor x = Tensor::from({1, 4}, {3.7, 3.7, 3.7, 3.7});
    Tensor s = softmax(x);
    for (double v : s.data()) REQUIRE(std::fabs(v - 0.25) < 1e-15);

    Tensor y = Tensor::from({1, 2}, {0.0, std::log(2.0)});
    Tensor sy = softmax(y);
    REQUIRE(std::fabs(sy.data()[0] - 1.0 / 3.0) < 1e-12);
    REQUIRE(std::fabs(sy.data()[1] - 2.0 / 3.0) < 1e-12);
}

TEST_CASE("softmax shift invariance and row normalization") {
    Tensor x = random_tensor({6, 9}, 42);
    Tensor shifted = Tensor::from(x.shape(), x.data());
    for (double& v : shifted.data()) v += 17.0;
    Tensor a = softmax(x), b = softmax(shifted);
    for (std::size_t i = 0; i < a.size(); ++i) {
        REQUIRE(std::fabs(a.data()[i] - b.data()[i]) < 1e-12);
        REQUIRE(a.data()[i] >= 0.0);
        REQUIRE(a.data()[i] <= 1.0);
    }
    for (std::size_t r = 0; r < 6; ++r) {
        double sum = 0.0;
        for (std::size_t j = 0; j < 9; ++j) sum += a.at(r, j);
        REQUIRE(std::fabs(sum - 1.0) < 1e-12);
    }
}

TEST_CASE("cross_entropy analytic cases") {
    Tensor uniform({2, 4}, 0.3);
    Tensor loss = cross_entropy(uniform, {0, 3});
    REQUIRE(std::fabs(loss.item() - std::log(4.0)) < 1e-12);

    Tensor sat({1, 3}, 0.0);
    sat.data()[1] = 1e9;
    REQUIRE(cross_entropy(sat, {1}).item() < 1e-6);

    REQUIRE_THROWS_AS(cross_entropy(uniform, {0, 4}), IndexError);
}

TEST_CASE("cross_entropy matches per-sample scalar reference") {
    Tensor logits = random_tensor({8, 5}, 7);
    std::vector<std::size_t> labels = {0, 4, 2, 1, 3, 3, 0, 2};
    double ref = 0.0;
    for (std::size_t i = 0; i < 8; ++i) {
        double mx = logits.at(i, 0);
        for (std::size_t j = 1; j < 5; ++j) mx = std::max(mx, logits.at(i, j));
        double lse = 0.0;
        for (std::size_t j = 0; j < 5; ++j) lse += std::exp(logits.at(i, j) - mx);
        ref += mx + std::log(lse) - logits.at(i, labels[i]);
    }
    ref /= 8.0;
    REQUIRE(std::fabs(cross_entropy(logits, labels).item() - ref) < 1e-12);
}

TEST_CASE("cosine_similarity analytic cases") {
    Tensor u = Tensor::from({3}, {0.4, -1.2, 2.0});
    REQUIRE(std::fabs(cosine_similarity(u, u).item() - 1.0) < 1e-6);

    Tensor e1 = Tensor::from({2}, {1.0, 0.0});
    Tensor e2 = Tensor::from({2}, {0.0, 1.0});
    REQUIRE(std::fabs(cosine_similarity(e1, e2).item()) < 1e-12);

    const double s = 1.0 / std::sqrt(2.0);
    Tensor diag = Tensor::from({2}, {s, s});
    REQUIRE(std::fabs(cosine_similarity(e1, diag).item() - s) < 1e-6);

    Tensor zero({2}, 0.0);
    REQUIRE(std::fabs(cosine_similarity(zero, e1).item()) < 1e-6);  // eps-regularized, no throw
}

TEST_CASE("layer_norm zero-variance convention and gelu at zero") {
    Tensor x({1, 5}, 3.25);
    Tensor gain({5}, 1.0);
    Tensor bias({5}, 0.0);
    Tensor y = layer_norm(x, gain, bias);
    for (double v : y.data()) REQUIRE(std::fabs(v) < 1e-12);

    REQUIRE(gelu(Tensor::scalar(0.0)).item() == 0.0);
}

TEST_CASE("causal attention ignores future positions") {
    const std::size_t n = 5, d = 4;
    Tensor q = random_tensor({n, d}, 1), k = random_tensor({n, d}, 2), v = random_tensor({n, d}, 3);
    Tensor base = scaled_dot_attention(q, k, v, true);
    // perturb row n-1 of k and v; rows < n-1 of the output must not move
    Tensor k2 = Tensor::from(k.shape(), k.data());
    Tensor v2 = Tensor::from(v.shape(), v.data());
    for (std::size_t j = 0; j < d; ++j) {
        k2.data()[(n - 1) * d + j] += 3.0;
        v2.data()[(n - 1) * d + j] -= 2.0;
    }
    Tensor pert = scaled_dot_attention(q, k2, v2, true);
    for (std::size_t i = 0; i + 1 < n; ++i)
        for (std::size_t j = 0; j < d; ++j)
            REQUIRE(std::fabs(base.at(i, j) - pert.at(i, j)) < 1e-12);
}

TEST_CASE("backward of sum and quadratic") {
    Tensor x = random_tensor({3, 4}, 9, 1.0, true);
    sum_all(x).backward();
    for (double g : x.grad()) REQUIRE(g == 1.0);

    Tensor y = random_tensor({6}, 10, 1.0, true);
    sum_all(mul(y, y)).backward();
    for (std::size_t i = 0; i < y.size(); ++i)
        REQUIRE(std::fabs(y.grad()[i] - 2.0 * y.data()[i]) < 1e-12);
}

TEST_CASE("second backward without reset throws") {
    Tensor x = random_tensor({4}, 3, 1.0, true);
    Tensor loss = sum_all(mul(x, x));
    loss.backward();
    REQUIRE_THROWS_AS(loss.backward(), ArgumentError);
    REQUIRE_THROWS_AS(random_tensor({2, 2}, 1, 1.0, true).backward(), DimError);
}

TEST_CASE("every primitive passes finite-difference checks over seeds") {
    using Fn = std::function<Tensor(const Tensor&)>;
    Tensor aux = random_tensor({6, 4}, 77);
    Tensor gain = random_tensor({4}, 78, 0.5);
    Tensor bias = random_tensor({4}, 79, 0.5);
    std::vector<std::pair<const char*, Fn>> cases = {
        {"add", [&](const Tensor& x) { return sum_all(mul(add(x, aux), aux)); }},
        {"sub", [&](const Tensor& x) { return sum_all(mul(sub(aux, x), aux)); }},
        {"mul", [&](const Tensor& x) { return sum_all(mul(mul(x, aux), aux)); }},
        {"scale", [&](const Tensor& x) { return sum_all(scale(x, -2.5)); }},
        {"matmul_lhs", [&](const Tensor& x) { return sum_all(mul(matmul(x, transpose(aux)), matmul(x, transpose(aux)))); }},
        {"matmul_rhs", [&](const Tensor& x) { return mean_all(matmul(aux, transpose(x))); }},
        {"softmax", [&](const Tensor& x) { return sum_all(mul(softmax(x), aux)); }},
        {"gelu", [&](const Tensor& x) { return sum_all(mul(gelu(x), aux)); }},
        {"layer_norm", [&](const Tensor& x) { return sum_all(mul(layer_norm(x, gain, bias), aux)); }},
        {"mean_axis0", [&](const Tensor& x) { return sum_all(mul(mean_axis0(x), gain)); }},
        {"transpose", [&](const Tensor& x) { return sum_all(mul(transpose(x), transpose(aux))); }},
        {"slice", [&](const Tensor& x) { return mean_all(slice_rows(slice_cols(x, 1, 4), 0, 3)); }},
        {"concat", [&](const Tensor& x) { return mean_all(mul(concat_rows(x, aux), concat_rows(aux, x))); }},
        {"cross_entropy", [&](const Tensor& x) { return cross_entropy(x, {1, 3, 0, 2, 1, 3}); }},
        {"attention_q", [&](const Tensor& x) { return mean_all(scaled_dot_attention(x, aux, aux, true)); }},
        {"attention_kv", [&](const Tensor& x) { return mean_all(scaled_dot_attention(aux, x, x, false)); }},
    };
    for (auto& [name, fn] : cases) {
        INFO(name);
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            Tensor x = random_tensor({6, 4}, derive_seed(seed, name), 0.8);
            REQUIRE(grad_check(fn, x, 1e-5) < 1e-6);
        }
    }
}

TEST_CASE("cosine and embedding gradients") {
    Tensor v = random_tensor({5}, 21);
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Tensor u = random_tensor({5}, derive_seed(seed, "cos"), 1.0);
        REQUIRE(grad_check([&](const Tensor& x) { return cosine_similarity(x, v); }, u) < 1e-6);
    }
    std::vector<std::size_t> ids = {0, 2, 2, 4};
    Tensor coeff = random_tensor({4, 3}, 22);
    auto f = [&](const Tensor& table) { return sum_all(mul(embedding_lookup(table, ids), coeff)); };
    REQUIRE(grad_check(f, random_tensor({5, 3}, 23)) < 1e-6);
    REQUIRE_THROWS_AS(embedding_lookup(random_tensor({5, 3}, 23), {5}), IndexError);
}

TEST_CASE("grad_check identities and negative control") {
    Tensor x = random_tensor({7}, 5);
    REQUIRE(grad_check([](const Tensor& t) { return sum_all(t); }, x) < 1e-10);

    auto composite = [](const Tensor& t) {
        return cross_entropy(reshape(t, {2, 4}), {1, 2});
    };
    REQUIRE(grad_check(composite, random_tensor({8}, 6)) < 1e-6);

    sabotage_backward() = true;
    double err = grad_check([](const Tensor& t) { return sum_all(gelu(t)); }, random_tensor({6}, 8));
    sabotage_backward() = false;
    REQUIRE(err > 1e-2);
}

TEST_CASE("tape replay determinism") {
    auto run = [](std::uint64_t seed) {
        Tensor x = random_tensor({5, 5}, seed, 1.0, true);
        Tensor w = random_tensor({5, 5}, seed + 1, 1.0, true);
        Tensor loss = mean_all(gelu(matmul(softmax(x), w)));
        loss.backward();
        std::vector<double> out = {loss.item()};
        out.insert(out.end(), x.grad().begin(), x.grad().end());
        out.insert(out.end(), w.grad().begin(), w.grad().end());
        return out;
    };
    REQUIRE(run(123) == run(123));
}

TEST_CASE("non-finite op results are rejected") {
    Tensor big({2}, 1e308);
    REQUIRE_THROWS_AS(mul(big, big), NumericError);
    REQUIRE_THROWS_AS(softmax(Tensor({0}, 0.0)), DimError);
}
