#include <gtest/gtest.h>

#include <set>

#include "ugp/errors.hpp"
#include "ugp/shooter.hpp"

using namespace ugp;

namespace {

constexpr const char* kVariants[] = {"shooter-a", "shooter-b", "shooter-c"};

// One enemy parked at (x, y) with no enemy fire and no movement for a long while.
ShooterEnv one_enemy_env(int player, int x, int y) {
  ShooterConfig c;
  c.pattern = EnemyPattern::march_and_descend;
  c.enemies_per_row = 1;
  c.move_period = 1000;
  c.enemy_fire_rate = 0.0;
  ShooterEnv env(c);
  env.reset(0);
  ShooterState s;
  s.player = player;
  Enemy e;
  e.x = e.home_x = x;
  e.y = e.home_y = y;
  s.enemies.push_back(e);
  s.steps = 1;  // keeps the formation still until tick 1000
  env.set_state(s);
  return env;
}

struct Rollout {
  double score = 0.0;
  std::size_t length = 0;
};

template <typename Policy>
Rollout play(ShooterEnv& env, std::uint64_t seed, Policy policy) {
  env.reset(seed);
  Rollout r;
  while (!env.state().terminal) {
    r.score += env.step(policy()).reward;
    ++r.length;
  }
  return r;
}

}  // namespace

TEST(Shooter, FireWithNoEnemyInColumnEarnsNothing) {
  ShooterEnv env = one_enemy_env(2, 7, 3);
  double total = env.step(static_cast<std::size_t>(ShooterAction::fire)).reward;
  for (int i = 0; i < 8; ++i) total += env.step(static_cast<std::size_t>(ShooterAction::noop)).reward;
  EXPECT_EQ(total, 0.0);
  EXPECT_FALSE(env.state().player_bullet.has_value());
}

TEST(Shooter, HandSimulatedKill) {
  // Player row is 9; the bullet spawns there and climbs 2 rows per tick:
  // tick 1 -> row 7, tick 2 -> row 5, tick 3 -> row 3 where the enemy sits.
  ShooterEnv env = one_enemy_env(5, 5, 3);
  const Observation t1 = env.step(static_cast<std::size_t>(ShooterAction::fire));
  EXPECT_EQ(t1.reward, 0.0);
  ASSERT_TRUE(env.state().player_bullet.has_value());
  EXPECT_EQ(env.state().player_bullet->y, 7);
  const Observation t2 = env.step(static_cast<std::size_t>(ShooterAction::noop));
  EXPECT_EQ(t2.reward, 0.0);
  EXPECT_EQ(env.state().player_bullet->y, 5);
  const Observation t3 = env.step(static_cast<std::size_t>(ShooterAction::noop));
  EXPECT_EQ(t3.reward, env.config().kill_reward);
  EXPECT_FALSE(env.state().enemies[0].alive);
  // The only enemy is gone, so the wave is cleared.
  EXPECT_TRUE(t3.terminal);
}

TEST(Shooter, SameSeedSameActionsSameOutcome) {
  for (const char* v : kVariants) {
    auto run = [&] {
      ShooterEnv env(shooter_config(v));
      env.reset(77);
      CounterRng actions(5);
      double score = 0.0;
      std::size_t t = 0;
      for (; t < 200 && !env.state().terminal; ++t) score += env.step(actions.below(kShooterActions)).reward;
      return std::pair{score, t};
    };
    EXPECT_EQ(run(), run()) << v;
  }
}

TEST(Shooter, StepAfterTerminalAndBadActions) {
  ShooterEnv env(shooter_config("shooter-a"));
  EXPECT_THROW(env.step(0), ContractViolation);  // never reset
  env.reset(1);
  EXPECT_THROW(env.step(kShooterActions), IndexError);
  while (!env.state().terminal) env.step(0);
  EXPECT_THROW(env.step(0), ContractViolation);
}

TEST(Shooter, VariantsShareActionsAndObservationProfile) {
  const auto first = make_shooter("shooter-a");
  for (const char* v : kVariants) {
    const auto env = make_shooter(v);
    EXPECT_EQ(env->action_count(), first->action_count());
    EXPECT_EQ(env->frame_profile(), first->frame_profile());
    EXPECT_EQ(make_shooter(v, true)->frame_profile(), make_shooter("shooter-a", true)->frame_profile());
  }
  EXPECT_THROW(shooter_config("shooter-z"), LookupError);
  EXPECT_TRUE(is_shooter_variant("shooter-c"));
  EXPECT_FALSE(is_shooter_variant("pong"));
}

TEST(Shooter, InvariantsHoldUnderRandomPlay) {
  for (const char* v : kVariants) {
    ShooterEnv env(shooter_config(v));
    const auto& c = env.config();
    CounterRng actions(11);
    for (std::uint64_t ep = 0; ep < 30; ++ep) {
      env.reset(ep);
      double last_score = 0.0;
      while (!env.state().terminal) {
        const Observation o = env.step(actions.below(kShooterActions));
        const auto& s = env.state();
        ASSERT_GE(o.reward, 0.0);
        ASSERT_GE(s.score, last_score);
        last_score = s.score;
        ASSERT_LE(s.steps, c.step_cap);
        ASSERT_GE(s.player, 0);
        ASSERT_LT(s.player, static_cast<int>(c.width));
        for (const Enemy& e : s.enemies) {
          ASSERT_GE(e.x, 0);
          ASSERT_LT(e.x, static_cast<int>(c.width));
          ASSERT_GE(e.y, 0);
          ASSERT_LT(e.y, static_cast<int>(c.height));
        }
        for (double f : o.features) {
          ASSERT_GE(f, 0.0);
          ASSERT_LE(f, 1.0);
        }
      }
    }
  }
}

TEST(Shooter, RandomPolicyScoresBelowScriptedPolicy) {
  for (const char* v : kVariants) {
    ShooterEnv env(shooter_config(v));
    CounterRng actions(3);
    double random_total = 0.0, scripted_total = 0.0;
    for (std::uint64_t ep = 0; ep < 100; ++ep) {
      random_total += play(env, ep, [&] { return actions.below(kShooterActions); }).score;
      scripted_total += play(env, ep, [&] { return track_and_fire_action(env.state(), env.config()); }).score;
    }
    EXPECT_LT(random_total / 100, scripted_total / 100) << v;
  }
}

TEST(Shooter, VariantAEpisodesAreShorterThanVariantB) {
  auto mean_length = [](const char* v) {
    ShooterEnv env(shooter_config(v));
    CounterRng actions(4);
    double total = 0.0;
    for (std::uint64_t ep = 0; ep < 100; ++ep) {
      total += static_cast<double>(play(env, ep, [&] { return actions.below(kShooterActions); }).length);
    }
    return total / 100;
  };
  EXPECT_LT(mean_length("shooter-a"), mean_length("shooter-b"));
}

TEST(Shooter, EpisodeLengthNeverExceedsCap) {
  for (const char* v : kVariants) {
    ShooterEnv env(shooter_config(v));
    for (std::uint64_t ep = 0; ep < 20; ++ep) {
      // Hiding in a corner never ends the episode early on purpose.
      const Rollout r = play(env, ep, [] { return static_cast<std::size_t>(ShooterAction::left); });
      EXPECT_LE(r.length, env.config().step_cap) << v;
    }
  }
}

TEST(Shooter, ImageProfileRendersTheGrid) {
  ShooterConfig c = shooter_config("shooter-a");
  c.image_profile = true;
  ShooterEnv env(c);
  const Observation o = env.reset(3);
  EXPECT_EQ(o.height, c.height);
  EXPECT_EQ(o.width, c.width);
  EXPECT_EQ(o.channels, 1u);
  ASSERT_EQ(o.pixels.size(), c.height * c.width);
  EXPECT_EQ(o.pixels[(c.height - 1) * c.width + static_cast<std::size_t>(env.state().player)], 255);
  EXPECT_TRUE(o.features.empty());
}

TEST(Shooter, VectorObservationEncodesPlayerColumn) {
  ShooterEnv env(shooter_config("shooter-b"));
  const Observation o = env.reset(8);
  ASSERT_EQ(o.features.size(), kShooterBlocks * env.config().width);
  for (std::size_t x = 0; x < env.config().width; ++x) {
    EXPECT_EQ(o.features[x], static_cast<int>(x) == env.state().player ? 1.0 : 0.0);
  }
}

TEST(Shooter, RoamingWindowMovesBetweenEpisodes) {
  const ShooterConfig c = shooter_config("shooter-a");
  ASSERT_TRUE(c.roaming_window);
  const int span = static_cast<int>(c.column_hi - c.column_lo);
  std::set<int> starts;
  CounterRng rng(11);
  for (std::uint64_t seed = 0; seed < 60; ++seed) {
    ShooterEnv env(c);
    env.reset(seed);
    const int lo = env.state().window_lo;
    starts.insert(lo);
    ASSERT_GE(lo, 0);
    ASSERT_LE(lo + span, static_cast<int>(c.width));
    while (!env.state().terminal) {
      for (const Enemy& e : env.state().enemies) {
        if (!e.alive) continue;
        ASSERT_GE(e.x, lo) << "seed " << seed;
        ASSERT_LT(e.x, lo + span) << "seed " << seed;
      }
      env.step(rng.below(kShooterActions));
    }
  }
  EXPECT_EQ(starts.size(), c.width - static_cast<std::size_t>(span) + 1);
}

TEST(Shooter, ViewShiftMovesEnemiesButNotThePlayer) {
  ShooterConfig plain = shooter_config("shooter-c");
  plain.view_shift = 0;
  ShooterConfig shifted = plain;
  shifted.view_shift = 5;
  ShooterEnv a(plain), b(shifted);
  const Observation oa = a.reset(4);
  const Observation ob = b.reset(4);
  const std::size_t w = plain.width;
  for (std::size_t x = 0; x < w; ++x) {
    EXPECT_EQ(oa.features[x], ob.features[x]);
    for (std::size_t block = 1; block < kShooterBlocks; ++block) {
      EXPECT_EQ(oa.features[block * w + x], ob.features[block * w + (x + 5) % w]) << "block " << block;
    }
  }
  // Same game underneath: identical rewards for identical actions.
  for (int t = 0; t < 50 && !a.state().terminal; ++t) {
    EXPECT_EQ(a.step(3).reward, b.step(3).reward);
  }
}

TEST(ShooterConfig, ValidationRejectsBadConfigs) {
  ShooterConfig c;
  c.width = 7;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ShooterConfig{};
  c.step_cap = 99;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ShooterConfig{};
  c.kill_reward = -1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ShooterConfig{};
  c.column_lo = 5;
  c.column_hi = 5;
  EXPECT_THROW(c.validate(), ConfigError);
  for (const char* v : kVariants) EXPECT_NO_THROW(shooter_config(v).validate());
}
