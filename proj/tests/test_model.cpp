// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <vector>

#include "fd_oracle.hpp"
#include "reference_vit.hpp"
#include "vibvit/model.hpp"

using namespace vibvit;
using vibvit::testing::randomize;
using vibvit::testing::reference_forward;

namespace {

ViTConfig tiny_config() {
    ViTConfig c;
    c.image_size = 8;
    c.patch_size = 4;
    c.channels = 3;
    c.embed_dim = 8;
    c.depth = 2;
    c.heads_per_block = 2;
    c.mlp_ratio = 2;
    c.num_classes = 5;
    c.latent_dim = 3;
    return c;
}

template <class T>
std::vector<T> random_image(const ViTConfig& cfg, Rng& rng) {
    std::vector<T> img(cfg.image_numel());
    for (auto& v : img) v = static_cast<T>(rng.uniform(-2, 2));
    return img;
}

template <class T>
ViTModel<T> random_model(const ViTConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    ViTModel<T> m(cfg, rng);
    randomize(m, rng);
    return m;
}

}  // namespace

TEST(Patchify, TinyResolutionGives196Patches) {
    auto cfg = ViTConfig::vit_tiny();
    EXPECT_EQ(cfg.patch_count(), 196u);
    std::vector<float> img(cfg.image_numel(), 0.f);
    EXPECT_EQ(patchify<float>(img, cfg).shape(), (Shape{196, 768}));
}

TEST(Patchify, DeskResolutionGives64Patches) {
    auto cfg = ViTConfig::desk();
    std::vector<float> img(cfg.image_numel(), 0.f);
    EXPECT_EQ(patchify<float>(img, cfg).shape(), (Shape{64, 48}));
}

TEST(Patchify, RoundTripIsExact) {
    auto cfg = ViTConfig::desk();
    Rng rng(1);
    auto img = random_image<float>(cfg, rng);
    EXPECT_EQ(unpatchify(patchify<float>(img, cfg), cfg), img);
}

TEST(Patchify, RowMajorPatchOrder) {
    ViTConfig cfg = tiny_config();
    cfg.channels = 1;
    std::vector<double> img(64);
    std::iota(img.begin(), img.end(), 0.0);
    auto p = patchify<double>(img, cfg);
    // patch 1 is the top-right 4x4 block
    EXPECT_EQ(p.at(1, 0), 4.0);
    EXPECT_EQ(p.at(1, 5), 13.0);
    // patch 2 starts on row 4
    EXPECT_EQ(p.at(2, 0), 32.0);
}

TEST(Patchify, NonDivisibleSizeIsConfigError) {
    ViTConfig cfg = tiny_config();
    cfg.image_size = 10;
    std::vector<double> img(cfg.image_numel());
    EXPECT_THROW(patchify<double>(img, cfg), ConfigError);
    EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Embed, ZeroImageGivesPositions) {
    auto m = random_model<double>(tiny_config(), 2);
    m.patch_b.value.fill(0);
    Tensor<double> patches(Shape{4, m.config.patch_dim()});
    auto x = embed(patches, m);
    EXPECT_EQ(x.shape(), (Shape{4, 8}));
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(x[i], m.pos.value[i]);
}

TEST(Embed, IdenticalPatchesDifferByPositions) {
    auto m = random_model<double>(tiny_config(), 3);
    Rng rng(4);
    auto patches = vibvit::testing::random_tensor({4, m.config.patch_dim()}, rng);
    for (std::size_t j = 0; j < m.config.patch_dim(); ++j) patches.at(2, j) = patches.at(0, j);
    auto x = embed(patches, m);
    for (std::size_t j = 0; j < 8; ++j) {
        EXPECT_NEAR(x.at(2, j) - x.at(0, j), m.pos.value.at(2, j) - m.pos.value.at(0, j), 1e-12);
    }
}

TEST(Attention, SinglePatchAttendsToItself) {
    ViTConfig cfg = tiny_config();
    cfg.image_size = 4;
    auto m = random_model<double>(cfg, 5);
    Rng rng(6);
    auto stream = vibvit::testing::random_tensor({1, 8}, rng);
    auto hu = attention_head_update(stream, 0, 1, m);
    EXPECT_EQ(hu.attention_map.shape(), (Shape{1, 1}));
    EXPECT_EQ(hu.attention_map[0], 1.0);
}

TEST(Attention, IdenticalKeysGiveUniformRows) {
    auto m = random_model<double>(tiny_config(), 7);
    m.blocks[0].k_w.value.fill(0);
    Rng rng(8);
    auto stream = vibvit::testing::random_tensor({4, 8}, rng);
    auto hu = attention_head_update(stream, 0, 0, m);
    for (double a : hu.attention_map.data()) EXPECT_NEAR(a, 0.25, 1e-15);
}

TEST(Attention, RowsSumToOne) {
    auto m = random_model<double>(tiny_config(), 9);
    Rng rng(10);
    auto stream = vibvit::testing::random_tensor({4, 8}, rng, -3, 3);
    for (std::size_t h = 0; h < 2; ++h) {
        auto hu = attention_head_update(stream, 1, h, m);
        EXPECT_EQ(hu.delta.shape(), (Shape{4, 4}));
        for (std::size_t i = 0; i < 4; ++i) {
            double s = 0;
            for (std::size_t j = 0; j < 4; ++j) s += hu.attention_map.at(i, j);
            EXPECT_NEAR(s, 1.0, 1e-6);
        }
    }
}

TEST(Mlp, PatchwiseLocality) {
    auto m = random_model<double>(tiny_config(), 11);
    Rng rng(12);
    auto stream = vibvit::testing::random_tensor({4, 8}, rng);
    auto base = mlp_block(stream, 0, m);
    EXPECT_EQ(base.shape(), stream.shape());
    auto pert = stream;
    for (std::size_t j = 0; j < 8; ++j) pert.at(2, j) += rng.uniform(-1, 1);
    auto out = mlp_block(pert, 0, m);
    for (std::size_t i : {0, 1, 3})
        for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(out.at(i, j), base.at(i, j));
}

TEST(Mlp, ZeroWeightsArePureResidual) {
    auto m = random_model<double>(tiny_config(), 13);
    auto& b = m.blocks[1];
    for (auto* p : {&b.fc1_w, &b.fc1_b, &b.fc2_w, &b.fc2_b}) p->value.fill(0);
    Rng rng(14);
    auto stream = vibvit::testing::random_tensor({4, 8}, rng);
    EXPECT_EQ(mlp_block(stream, 1, m), stream);
}

TEST(Gap, EqualRowsGiveIdenticalVotes) {
    auto m = random_model<double>(tiny_config(), 15);
    Rng rng(16);
    Tensor<double> stream(Shape{4, 8});
    std::vector<double> r(8);
    for (auto& v : r) v = rng.uniform(-1, 1);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 8; ++j) stream.at(i, j) = r[j];
    auto out = gap_classify(stream, m);
    for (std::size_t c = 0; c < 5; ++c) {
        double wr = m.head_b.value[c];
        for (std::size_t j = 0; j < 8; ++j) wr += m.head_w.value.at(j, c) * r[j];
        EXPECT_NEAR(out.logits[c], wr, 1e-12);
        for (std::size_t i = 1; i < 4; ++i) EXPECT_EQ(out.per_patch_logits.at(i, c), out.per_patch_logits.at(0, c));
    }
}

TEST(Gap, PooledVotesPlusBiasEqualLogits) {
    auto m = random_model<double>(tiny_config(), 17);
    Rng rng(18);
    auto out = gap_classify(vibvit::testing::random_tensor({4, 8}, rng), m);
    for (std::size_t c = 0; c < 5; ++c) {
        double s = 0;
        for (std::size_t i = 0; i < 4; ++i) s += out.per_patch_logits.at(i, c);
        EXPECT_NEAR(s / 4 + m.head_b.value[c], out.logits[c], 1e-12);
    }
}

TEST(Gap, ZeroStreamGivesBias) {
    auto m = random_model<double>(tiny_config(), 19);
    auto out = gap_classify(Tensor<double>(Shape{4, 8}), m);
    for (std::size_t c = 0; c < 5; ++c) EXPECT_EQ(out.logits[c], m.head_b.value[c]);
}

TEST(Forward, DisabledMatchesReference) {
    auto m = random_model<double>(tiny_config(), 20);
    Rng rng(21);
    for (int t = 0; t < 10; ++t) {
        auto img = random_image<double>(m.config, rng);
        auto tr = forward<double>(img, m, BottleneckMode::disabled, nullptr);
        auto ref = reference_forward(img, m);
        for (std::size_t c = 0; c < 5; ++c) EXPECT_NEAR(tr.logits[c], ref.logits[c], 1e-10);
        EXPECT_EQ(tr.total_kl, 0.0);
        EXPECT_TRUE(tr.head_latent_means.empty());
    }
}

TEST(Forward, DisabledMatchesReferenceInFloat) {
    auto md = random_model<double>(ViTConfig::desk(), 22);
    auto mf = md.cast<float>();
    auto back = mf.cast<double>();  // reference sees the float weights exactly
    Rng rng(23);
    auto img = random_image<double>(md.config, rng);
    std::vector<float> imgf(img.begin(), img.end());
    std::vector<double> imgd(imgf.begin(), imgf.end());
    auto tr = forward<float>(imgf, mf, BottleneckMode::disabled, nullptr);
    auto ref = reference_forward(imgd, back);
    for (std::size_t c = 0; c < 10; ++c) EXPECT_NEAR(tr.logits[c], ref.logits[c], 1e-5);
}

TEST(Forward, MeanAndPriorMeanMatchReferenceIncludingKl) {
    auto m = random_model<double>(tiny_config(), 24);
    Rng rng(25);
    auto img = random_image<double>(m.config, rng);
    for (auto mode : {BottleneckMode::mean, BottleneckMode::prior_mean}) {
        auto tr = forward<double>(img, m, mode, nullptr);
        auto ref = reference_forward(img, m, mode);
        for (std::size_t c = 0; c < 5; ++c) EXPECT_NEAR(tr.logits[c], ref.logits[c], 1e-10);
        ASSERT_EQ(tr.kl_records.size(), ref.kl_per_head_patch.size());
        double total = 0;
        for (std::size_t r = 0; r < tr.kl_records.size(); ++r) {
            const auto& rec = tr.kl_records[r];
            EXPECT_EQ((rec.layer * 2 + rec.head) * 4 + rec.patch, r);
            EXPECT_NEAR(rec.kl_nats, ref.kl_per_head_patch[r], 1e-10);
            EXPECT_NEAR(rec.kl_nats, std::accumulate(rec.per_dim_kl.begin(), rec.per_dim_kl.end(), 0.0), 1e-12);
            total += rec.kl_nats;
        }
        EXPECT_NEAR(tr.total_kl, total, 1e-12);
        EXPECT_GT(total, 0.0);
    }
}

TEST(Forward, PriorMeanIsLocal) {
    auto m = random_model<float>(ViTConfig::desk(), 26);
    Rng rng(27);
    const auto& cfg = m.config;
    for (int t = 0; t < 3; ++t) {
        auto img = random_image<float>(cfg, rng);
        auto base = forward<float>(img, m, BottleneckMode::prior_mean, nullptr);
        const std::size_t target = rng.below(cfg.patch_count());
        auto patches = patchify<float>(img, cfg);
        for (std::size_t j = 0; j < cfg.patch_dim(); ++j) patches.at(target, j) += float(rng.uniform(-1, 1));
        auto pert = forward<float>(unpatchify(patches, cfg), m, BottleneckMode::prior_mean, nullptr);
        for (std::size_t i = 0; i < cfg.patch_count(); ++i) {
            bool same = true;
            for (std::size_t j = 0; j < cfg.embed_dim; ++j) same = same && pert.final_repr.at(i, j) == base.final_repr.at(i, j);
            EXPECT_EQ(same, i != target) << "patch " << i;
        }
    }
}

TEST(Forward, MeanModeIgnoresRng) {
    auto m = random_model<double>(tiny_config(), 28);
    Rng rng(29), r1(1), r2(2);
    auto img = random_image<double>(m.config, rng);
    auto a = forward<double>(img, m, BottleneckMode::mean, &r1);
    auto b = forward<double>(img, m, BottleneckMode::mean, &r2);
    EXPECT_EQ(a.logits, b.logits);
    EXPECT_EQ(a.final_repr, b.final_repr);
    EXPECT_EQ(a.total_kl, b.total_kl);
    EXPECT_EQ(a.head_latent_means, b.head_latent_means);
}

TEST(Forward, StochasticNeedsRng) {
    auto m = random_model<double>(tiny_config(), 30);
    std::vector<double> img(m.config.image_numel());
    EXPECT_THROW(forward<double>(img, m, BottleneckMode::stochastic, nullptr), UsageError);
}

TEST(Forward, StochasticSameSeedSameOutput) {
    auto m = random_model<double>(tiny_config(), 31);
    Rng rng(32), r1(5), r2(5), r3(6);
    auto img = random_image<double>(m.config, rng);
    auto a = forward<double>(img, m, BottleneckMode::stochastic, &r1);
    auto b = forward<double>(img, m, BottleneckMode::stochastic, &r2);
    auto c = forward<double>(img, m, BottleneckMode::stochastic, &r3);
    EXPECT_EQ(a.logits, b.logits);
    EXPECT_NE(a.logits, c.logits);
}

TEST(Forward, AttentionMapsAreRowStochastic) {
    auto m = random_model<float>(ViTConfig::desk(), 33);
    Rng rng(34);
    auto img = random_image<float>(m.config, rng);
    auto tr = forward<float>(img, m, BottleneckMode::stochastic, &rng);
    ASSERT_EQ(tr.attention_maps.size(), 8u);
    for (const auto& a : tr.attention_maps)
        for (std::size_t i = 0; i < 64; ++i) {
            double s = 0;
            for (std::size_t j = 0; j < 64; ++j) s += a.at(i, j);
            EXPECT_NEAR(s, 1.0, 1e-5);
        }
}

TEST(Forward, PerPatchLogitsDecomposeLogits) {
    auto m = random_model<float>(ViTConfig::desk(), 35);
    Rng rng(36);
    auto tr = forward<float>(random_image<float>(m.config, rng), m, BottleneckMode::mean, nullptr);
    for (std::size_t c = 0; c < 10; ++c) {
        double s = 0;
        for (std::size_t i = 0; i < 64; ++i) s += tr.per_patch_logits.at(i, c);
        EXPECT_NEAR(s / 64 + m.head_b.value[c], tr.logits[c], 1e-5);
    }
}

TEST(Forward, PermutationEquivariance) {
    auto m = random_model<double>(tiny_config(), 37);
    const auto& cfg = m.config;
    Rng rng(38);
    auto img = random_image<double>(cfg, rng);
    std::vector<std::size_t> perm{2, 0, 3, 1};  // new position i holds old patch perm[i]
    auto patches = patchify<double>(img, cfg);
    Tensor<double> pp(patches.shape());
    auto pm = m;
    for (std::size_t i = 0; i < 4; ++i) {
        for (std::size_t j = 0; j < cfg.patch_dim(); ++j) pp.at(i, j) = patches.at(perm[i], j);
        for (std::size_t j = 0; j < cfg.embed_dim; ++j) pm.pos.value.at(i, j) = m.pos.value.at(perm[i], j);
    }
    for (auto mode : {BottleneckMode::disabled, BottleneckMode::mean}) {
        auto a = forward<double>(img, m, mode, nullptr);
        auto b = forward<double>(unpatchify(pp, cfg), pm, mode, nullptr);
        for (std::size_t i = 0; i < 4; ++i)
            for (std::size_t j = 0; j < cfg.embed_dim; ++j)
                EXPECT_NEAR(b.final_repr.at(i, j), a.final_repr.at(perm[i], j), 1e-10);
        for (std::size_t c = 0; c < 5; ++c) EXPECT_NEAR(a.logits[c], b.logits[c], 1e-5);
    }
}

TEST(Forward, SinglePatchImageRuns) {
    ViTConfig cfg = tiny_config();
    cfg.image_size = 4;
    auto m = random_model<float>(cfg, 39);
    Rng rng(40);
    auto tr = forward<float>(random_image<float>(cfg, rng), m, BottleneckMode::stochastic, &rng);
    EXPECT_EQ(tr.logits.size(), 5u);
    EXPECT_EQ(tr.kl_records.size(), 4u);
    for (const auto& a : tr.attention_maps) EXPECT_EQ(a[0], 1.0f);
}

TEST(Forward, BatchEqualsSingleImages) {
    auto m = random_model<double>(tiny_config(), 41);
    Rng rng(42);
    auto a = random_image<double>(m.config, rng), b = random_image<double>(m.config, rng);
    std::vector<double> both(a);
    both.insert(both.end(), b.begin(), b.end());
    auto tb = forward_batch<double>(both, 2, m, BottleneckMode::mean, nullptr);
    auto ta = forward<double>(a, m, BottleneckMode::mean, nullptr);
    auto t2 = forward<double>(b, m, BottleneckMode::mean, nullptr);
    for (std::size_t c = 0; c < 5; ++c) {
        EXPECT_NEAR(tb[0].logits[c], ta.logits[c], 1e-12);
        EXPECT_NEAR(tb[1].logits[c], t2.logits[c], 1e-12);
    }
    EXPECT_NEAR(tb[1].total_kl, t2.total_kl, 1e-12);
}

TEST(Model, ParameterCensus) {
    Rng rng(0);
    ViTModel<float> m(ViTConfig::desk(), rng);
    std::size_t channels = 0, exempt = 0, total = 0;
    m.visit([&](const Parameter<float>& p) {
        ++total;
        if (p.name.find(".vib.") != std::string::npos) {
            ++channels;
            EXPECT_TRUE(p.decay_exempt) << p.name;
        }
        if (p.value.rank() == 1) {
            EXPECT_TRUE(p.decay_exempt) << p.name;
        }
        exempt += p.decay_exempt;
    });
    EXPECT_EQ(channels, 4u * 4 * 2);  // four tensors per channel
    EXPECT_FALSE(m.find("pos_embed")->decay_exempt);
    EXPECT_EQ(m.find("pos_embed")->value.shape(), (Shape{64, 64}));
    EXPECT_NE(m.find("blocks.3.vib.1.enc.weight"), nullptr);
    EXPECT_GT(total, exempt);
}

TEST(Model, FullLossGradientMatchesFiniteDifferences) {
    // stochastic mode, noise frozen by reseeding each evaluation
    auto m = random_model<double>(tiny_config(), 43);
    Rng rng(44);
    const std::size_t B = 2;
    std::vector<double> imgs;
    for (std::size_t b = 0; b < B; ++b) {
        auto i = random_image<double>(m.config, rng);
        imgs.insert(imgs.end(), i.begin(), i.end());
    }
    std::vector<int> labels{1, 3};
    const double beta = 0.3;
    auto loss_of = [&](ViTModel<double>& model, bool grads) {
        Tape<double> tape;
        auto mv = bind_params(tape, model);
        Rng noise(77);
        auto g = forward_graph<double>(tape, mv, model.config, imgs, B, BottleneckMode::stochastic, &noise);
        auto ce = ops::mean(ops::cross_entropy(g.logits, std::span<const int>(labels)));
        auto loss = ops::add(ce, ops::scale(g.kl_sum, beta / double(B)));
        if (grads) {
            model.zero_grad();
            tape.backward(loss);
            tape.accumulate_param_grads();
        }
        return loss.value().item();
    };
    loss_of(m, true);
    std::vector<std::string> names{"blocks.0.vib.1.enc.weight", "blocks.1.vib.0.enc.bias", "blocks.0.vib.0.dec.weight",
                                   "blocks.1.attn.q.weight",    "patch_embed.weight",      "pos_embed",
                                   "head.weight",               "blocks.0.norm1.weight"};
    for (const auto& name : names) {
        auto* p = m.find(name);
        ASSERT_NE(p, nullptr) << name;
        for (int t = 0; t < 3; ++t) {
            const std::size_t k = rng.below(p->value.size());
            const double orig = p->value[k], h = 1e-5;
            p->value[k] = orig + h;
            const double fp = loss_of(m, false);
            p->value[k] = orig - h;
            const double fm = loss_of(m, false);
            p->value[k] = orig;
            const double fd = (fp - fm) / (2 * h);
            const double an = p->grad[k];
            EXPECT_LT(std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6}), 1e-3)
                << name << "[" << k << "] fd=" << fd << " tape=" << an;
        }
    }
}
