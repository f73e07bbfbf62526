#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <vector>

#include "ebsr/autograd.hpp"
#include "oracles.hpp"

using namespace ebsr;

namespace {

using Builder = std::function<VarId(Graph&, const std::vector<VarId>&)>;

double eval_loss(const std::vector<Tensor>& inputs, const Builder& build) {
    Graph g(false);
    std::vector<VarId> ids;
    for (const Tensor& t : inputs) ids.push_back(g.leaf(t));
    return g.val(build(g, ids)).data[0];
}

// Central finite differences against the analytic gradient of a scalar loss,
// exhaustively over every element of every input.
void gradcheck(std::vector<Tensor> inputs, const Builder& build, double h = 1e-6,
               double tol = 1e-6) {
    Graph g;
    std::vector<VarId> ids;
    for (const Tensor& t : inputs) ids.push_back(g.leaf(t));
    VarId loss = build(g, ids);
    REQUIRE(g.val(loss).numel() == 1);
    g.backward(loss);

    for (std::size_t i = 0; i < inputs.size(); ++i) {
        const Tensor* gp = g.grad_of(ids[i]);
        REQUIRE(gp != nullptr);
        const Tensor& grad = *gp;
        REQUIRE(grad.shape == inputs[i].shape);
        for (std::size_t j = 0; j < inputs[i].data.size(); ++j) {
            const double keep = inputs[i].data[j];
            inputs[i].data[j] = keep + h;
            const double up = eval_loss(inputs, build);
            inputs[i].data[j] = keep - h;
            const double dn = eval_loss(inputs, build);
            inputs[i].data[j] = keep;
            const double fd = (up - dn) / (2.0 * h);
            const double an = grad.data[j];
            const double err = std::fabs(fd - an) / std::max({1.0, std::fabs(fd), std::fabs(an)});
            INFO("input " << i << " element " << j << " analytic " << an << " fd " << fd);
            REQUIRE(err < tol);
        }
    }
}

Tensor rand_t(Rng& rng, const Shape& s, double lo = -1.0, double hi = 1.0) {
    return oracle::random_tensor(rng, s, lo, hi);
}

}  // namespace

TEST_CASE("elementwise and shape ops differentiate") {
    Rng rng(100);
    SECTION("add and scale") {
        Tensor w = rand_t(rng, {2, 3});
        gradcheck({rand_t(rng, {2, 3}), rand_t(rng, {2, 3})},
                  [&](Graph& g, const std::vector<VarId>& in) {
                      return weighted_sum(g, scale(g, add(g, in[0], in[1]), 1.7), w);
                  });
    }
    SECTION("add_const treats the constant as data") {
        Tensor c = rand_t(rng, {4});
        Tensor w = rand_t(rng, {4});
        gradcheck({rand_t(rng, {4})}, [&](Graph& g, const std::vector<VarId>& in) {
            return weighted_sum(g, add_const(g, in[0], c), w);
        });
    }
    SECTION("relu away from the kink") {
        Tensor x = rand_t(rng, {3, 3});
        for (double& v : x.data)
            if (std::fabs(v) < 0.05) v = 0.1;
        Tensor w = rand_t(rng, {3, 3});
        gradcheck({x}, [&](Graph& g, const std::vector<VarId>& in) {
            return weighted_sum(g, relu(g, in[0]), w);
        });
    }
    SECTION("gelu") {
        Tensor w = rand_t(rng, {2, 5});
        gradcheck({rand_t(rng, {2, 5}, -2.0, 2.0)}, [&](Graph& g, const std::vector<VarId>& in) {
            return weighted_sum(g, gelu(g, in[0]), w);
        });
    }
    SECTION("reshape") {
        Tensor w = rand_t(rng, {6});
        gradcheck({rand_t(rng, {2, 3})}, [&](Graph& g, const std::vector<VarId>& in) {
            return weighted_sum(g, reshape(g, in[0], {6}), w);
        });
    }
    SECTION("mean_all") {
        gradcheck({rand_t(rng, {3, 4})},
                  [](Graph& g, const std::vector<VarId>& in) { return mean_all(g, in[0]); });
    }
}

TEST_CASE("token layout ops differentiate") {
    Rng rng(101);
    SECTION("chw/token round trip") {
        Tensor w = rand_t(rng, {12, 3});
        gradcheck({rand_t(rng, {3, 3, 4})}, [&](Graph& g, const std::vector<VarId>& in) {
            return weighted_sum(g, chw_to_tokens(g, in[0]), w);
        });
        Tensor w2 = rand_t(rng, {3, 3, 4});
        gradcheck({rand_t(rng, {12, 3})}, [&](Graph& g, const std::vector<VarId>& in) {
            return weighted_sum(g, tokens_to_chw(g, in[0], 3, 4), w2);
        });
    }
    SECTION("cyclic roll") {
        Tensor w = rand_t(rng, {12, 2});
        gradcheck({rand_t(rng, {12, 2})}, [&](Graph& g, const std::vector<VarId>& in) {
            return weighted_sum(g, roll_tokens(g, in[0], 3, 4, -1, -2), w);
        });
    }
    SECTION("window partition and reverse") {
        Tensor w = rand_t(rng, {4, 4, 2});
        gradcheck({rand_t(rng, {16, 2})}, [&](Graph& g, const std::vector<VarId>& in) {
            return weighted_sum(g, tokens_to_windows(g, in[0], 4, 4, 2), w);
        });
        Tensor w2 = rand_t(rng, {16, 2});
        gradcheck({rand_t(rng, {4, 4, 2})}, [&](Graph& g, const std::vector<VarId>& in) {
            return weighted_sum(g, windows_to_tokens(g, in[0], 4, 4, 2), w2);
        });
    }
    SECTION("reflect pad and crop") {
        Tensor w = rand_t(rng, {2, 5, 6});
        gradcheck({rand_t(rng, {2, 3, 4})}, [&](Graph& g, const std::vector<VarId>& in) {
            return weighted_sum(g, pad_reflect_chw(g, in[0], 1, 1, 1, 1), w);
        });
        Tensor w2 = rand_t(rng, {2, 2, 2});
        gradcheck({rand_t(rng, {2, 4, 5})}, [&](Graph& g, const std::vector<VarId>& in) {
            return weighted_sum(g, crop_chw(g, in[0], 1, 2, 2, 2), w2);
        });
    }
    SECTION("concatenation and slicing") {
        Tensor w = rand_t(rng, {5, 2, 2});
        gradcheck({rand_t(rng, {2, 2, 2}), rand_t(rng, {3, 2, 2})},
                  [&](Graph& g, const std::vector<VarId>& in) {
                      return weighted_sum(g, concat_dim0(g, {in[0], in[1]}), w);
                  });
        Tensor w2 = rand_t(rng, {2, 3, 7});
        gradcheck({rand_t(rng, {2, 3, 4}), rand_t(rng, {2, 3, 3})},
                  [&](Graph& g, const std::vector<VarId>& in) {
                      return weighted_sum(g, concat_lastdim(g, {in[0], in[1]}), w2);
                  });
        Tensor w3 = rand_t(rng, {2, 3, 2});
        gradcheck({rand_t(rng, {2, 3, 6})}, [&](Graph& g, const std::vector<VarId>& in) {
            return weighted_sum(g, slice_lastdim(g, in[0], 2, 4), w3);
        });
    }
    SECTION("head split and merge") {
        Tensor w = rand_t(rng, {4, 3, 2});
        gradcheck({rand_t(rng, {2, 3, 4})}, [&](Graph& g, const std::vector<VarId>& in) {
            return weighted_sum(g, split_heads(g, in[0], 2), w);
        });
        Tensor w2 = rand_t(rng, {2, 3, 4});
        gradcheck({rand_t(rng, {4, 3, 2})}, [&](Graph& g, const std::vector<VarId>& in) {
            return weighted_sum(g, merge_heads(g, in[0], 2), w2);
        });
    }
    SECTION("pixel shuffle") {
        Tensor w = rand_t(rng, {2, 4, 6});
        gradcheck({rand_t(rng, {8, 2, 3})}, [&](Graph& g, const std::vector<VarId>& in) {
            return weighted_sum(g, pixel_shuffle(g, in[0], 2), w);
        });
    }
}

TEST_CASE("dense algebra ops differentiate") {
    Rng rng(102);
    SECTION("linear over trailing dim") {
        Tensor w = rand_t(rng, {3, 5, 4});
        gradcheck({rand_t(rng, {3, 5, 6}), rand_t(rng, {4, 6}), rand_t(rng, {4})},
                  [&](Graph& g, const std::vector<VarId>& in) {
                      return weighted_sum(g, linear(g, in[0], in[1], in[2]), w);
                  });
    }
    SECTION("batched matmul plain and transposed") {
        Tensor w = rand_t(rng, {2, 3, 4});
        gradcheck({rand_t(rng, {2, 3, 5}), rand_t(rng, {2, 5, 4})},
                  [&](Graph& g, const std::vector<VarId>& in) {
                      return weighted_sum(g, bmm(g, in[0], in[1], false), w);
                  });
        gradcheck({rand_t(rng, {2, 3, 5}), rand_t(rng, {2, 4, 5})},
                  [&](Graph& g, const std::vector<VarId>& in) {
                      return weighted_sum(g, bmm(g, in[0], in[1], true), w);
                  });
    }
    SECTION("layer norm") {
        Tensor w = rand_t(rng, {4, 6});
        gradcheck({rand_t(rng, {4, 6}), rand_t(rng, {6}, 0.5, 1.5), rand_t(rng, {6})},
                  [&](Graph& g, const std::vector<VarId>& in) {
                      return weighted_sum(g, layer_norm(g, in[0], in[1], in[2]), w);
                  },
                  1e-6, 1e-5);
    }
    SECTION("softmax over the last dim") {
        Tensor w = rand_t(rng, {3, 5});
        gradcheck({rand_t(rng, {3, 5}, -2.0, 2.0)}, [&](Graph& g, const std::vector<VarId>& in) {
            return weighted_sum(g, softmax_lastdim(g, in[0]), w);
        });
    }
    SECTION("window mask pass-through") {
        // Moderate mask values keep the finite-difference loss well scaled;
        // the -1e9 production value is covered by the masked-softmax tests.
        Tensor mask = Tensor({2, 3, 3});
        mask.at(1, 0, 2) = -5.0;
        mask.at(1, 2, 0) = -5.0;
        Tensor w = rand_t(rng, {4, 3, 3});
        gradcheck({rand_t(rng, {4, 3, 3})}, [&](Graph& g, const std::vector<VarId>& in) {
            return weighted_sum(g, add_window_mask(g, in[0], mask, 2), w);
        });
    }
    SECTION("relative position bias") {
        std::vector<std::int64_t> index = {0, 2, 1, 0};  // 2 tokens -> 4 pairs
        Tensor w = rand_t(rng, {4, 2, 2});
        gradcheck({rand_t(rng, {4, 2, 2}), rand_t(rng, {2, 3})},
                  [&](Graph& g, const std::vector<VarId>& in) {
                      return weighted_sum(g, add_relpos_bias(g, in[0], in[1], index, 2), w);
                  });
    }
    SECTION("mse and l1 losses") {
        Tensor target = rand_t(rng, {3, 4});
        gradcheck({rand_t(rng, {3, 4}, 2.0, 3.0)}, [&](Graph& g, const std::vector<VarId>& in) {
            return mse_to_target(g, in[0], target);
        });
        // Keep a safe margin from the |.| kink: inputs are far from the target.
        gradcheck({rand_t(rng, {3, 4}, 2.0, 3.0)}, [&](Graph& g, const std::vector<VarId>& in) {
            return l1_to_target(g, in[0], target);
        });
    }
}

TEST_CASE("convolutions differentiate") {
    Rng rng(103);
    SECTION("3x3 with padding") {
        Tensor w = rand_t(rng, {4, 5, 6});
        gradcheck({rand_t(rng, {3, 5, 6}), rand_t(rng, {4, 3, 3, 3}), rand_t(rng, {4})},
                  [&](Graph& g, const std::vector<VarId>& in) {
                      return weighted_sum(g, conv2d(g, in[0], in[1], in[2], 1), w);
                  });
    }
    SECTION("1x1 without padding") {
        Tensor w = rand_t(rng, {4, 3, 5});
        gradcheck({rand_t(rng, {2, 3, 5}), rand_t(rng, {4, 2, 1, 1}), rand_t(rng, {4})},
                  [&](Graph& g, const std::vector<VarId>& in) {
                      return weighted_sum(g, conv2d(g, in[0], in[1], in[2], 0), w);
                  });
    }
    SECTION("rectangular valid convolution") {
        Tensor w = rand_t(rng, {2, 3, 2});
        gradcheck({rand_t(rng, {2, 5, 4}), rand_t(rng, {2, 2, 3, 3}), rand_t(rng, {2})},
                  [&](Graph& g, const std::vector<VarId>& in) {
                      return weighted_sum(g, conv2d(g, in[0], in[1], in[2], 0), w);
                  });
    }
    SECTION("channel-mixing 1x1 helper") {
        Tensor w = rand_t(rng, {4, 3, 4});
        gradcheck({rand_t(rng, {2, 3, 4}), rand_t(rng, {4, 2}), rand_t(rng, {4})},
                  [&](Graph& g, const std::vector<VarId>& in) {
                      return weighted_sum(g, conv1x1(g, in[0], in[1], in[2]), w);
                  });
    }
}

TEST_CASE("graph bookkeeping") {
    Rng rng(104);
    SECTION("gradients accumulate across shared uses") {
        Tensor x = rand_t(rng, {3});
        Graph g;
        VarId v = g.leaf(x);
        VarId s = mean_all(g, add(g, v, v));
        g.backward(s);
        for (double gv : g.grad_of(v)->data)
            REQUIRE_THAT(gv, Catch::Matchers::WithinAbs(2.0 / 3.0, 1e-12));
    }
    SECTION("constants do not collect gradients") {
        Graph g;
        VarId c = g.constant(Tensor::full({2}, 1.0));
        VarId v = g.leaf(Tensor::full({2}, 2.0));
        VarId s = mean_all(g, add(g, v, c));
        g.backward(s);
        REQUIRE(g.needs_grad(v));
        REQUIRE_FALSE(g.needs_grad(c));
    }
    SECTION("backward requires a scalar root") {
        Graph g;
        VarId v = g.leaf(Tensor::full({3}, 1.0));
        REQUIRE_THROWS_AS(g.backward(v), ArgumentError);
    }
    SECTION("inference graphs skip tracking") {
        Graph g(false);
        VarId v = g.leaf(Tensor::full({2}, 1.0));
        VarId s = mean_all(g, v);
        REQUIRE_FALSE(g.needs_grad(s));
    }
    SECTION("loss scaling scales gradients linearly") {
        Tensor x = rand_t(rng, {4});
        Tensor w = rand_t(rng, {4});
        Graph g1, g2;
        VarId v1 = g1.leaf(x), v2 = g2.leaf(x);
        g1.backward(weighted_sum(g1, gelu(g1, v1), w));
        g2.backward(scale(g2, weighted_sum(g2, gelu(g2, v2), w), 3.0));
        for (std::size_t i = 0; i < 4; ++i)
            REQUIRE_THAT(g2.grad_of(v2)->data[i],
                         Catch::Matchers::WithinRel(3.0 * g1.grad_of(v1)->data[i], 1e-12));
    }
}

TEST_CASE("softmax rows are convex weights") {
    Rng rng(105);
    Graph g(false);
    VarId x = g.leaf(rand_t(rng, {6, 7}, -3.0, 3.0));
    const Tensor& y = g.val(softmax_lastdim(g, x));
    for (std::int64_t r = 0; r < 6; ++r) {
        double sum = 0.0;
        for (std::int64_t c = 0; c < 7; ++c) {
            REQUIRE(y.at(r, c) > 0.0);
            sum += y.at(r, c);
        }
        REQUIRE_THAT(sum, Catch::Matchers::WithinAbs(1.0, 1e-6));
    }
}

TEST_CASE("reflect padding validates and mirrors") {
    Graph g(false);
    Tensor x({1, 2, 3});
    for (std::size_t i = 0; i < 6; ++i) x.data[i] = static_cast<double>(i);
    VarId p = pad_reflect_chw(g, g.leaf(x), 1, 1, 1, 1);
    const Tensor& y = g.val(p);
    REQUIRE(y.shape == Shape{1, 4, 5});
    REQUIRE(y.at(0, 0, 0) == x.at(0, 1, 1));  // corner mirrors both axes
    REQUIRE(y.at(0, 1, 0) == x.at(0, 0, 1));
    REQUIRE(y.at(0, 0, 1) == x.at(0, 1, 0));
    REQUIRE_THROWS_AS(pad_reflect_chw(g, g.leaf(Tensor({1, 2, 2})), 2, 0, 0, 0), DimensionError);
}
