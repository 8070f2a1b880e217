#include <doctest.h>

#include <functional>
#include <map>

#include "modnet/layout.hpp"
#include "modnet/rng.hpp"

using namespace modnet;

namespace {

using Tokens = std::vector<LayoutToken>;
constexpr auto F = LayoutToken::Find;
constexpr auto R = LayoutToken::Relocate;
constexpr auto AND = LayoutToken::And;
constexpr auto FIL = LayoutToken::Filter;
constexpr auto EX = LayoutToken::Exist;
constexpr auto CNT = LayoutToken::Count;
constexpr auto DSC = LayoutToken::Describe;
constexpr auto CMP = LayoutToken::Compare;

// Independent validity oracle: plain stack simulation over output kinds,
// written separately from the library implementation.
bool oracle_valid(const Tokens& seq) {
  if (seq.empty()) return false;
  std::vector<OutputKind> stack;
  for (LayoutToken t : seq) {
    const TokenInfo& info = token_info(t);
    if (static_cast<int>(stack.size()) < info.arity) return false;
    for (int k = 0; k < info.arity; ++k) {
      if (stack.back() != OutputKind::Attention) return false;
      stack.pop_back();
    }
    stack.push_back(info.output);
  }
  return stack.size() == 1 && stack[0] == OutputKind::Answer;
}

void all_sequences(int len, const std::function<void(const Tokens&)>& fn) {
  Tokens seq(len);
  std::function<void(int)> rec = [&](int pos) {
    if (pos == len) {
      fn(seq);
      return;
    }
    for (int t = 0; t < kNumModuleTokens; ++t) {
      seq[pos] = static_cast<LayoutToken>(t);
      rec(pos + 1);
    }
  };
  rec(0);
}

// Second enumeration oracle: count layouts by recursive tree construction
// (attention trees by node count, then one answer root).
long count_attention_trees(int nodes, std::map<int, long>& memo) {
  if (nodes <= 0) return 0;
  auto it = memo.find(nodes);
  if (it != memo.end()) return it->second;
  long total = nodes == 1 ? 1 : 0;                                      // find
  if (nodes >= 2) total += 2 * count_attention_trees(nodes - 1, memo);  // relocate, filter
  for (int left = 1; left <= nodes - 2; ++left)                         // and, or
    total +=
        2 * count_attention_trees(left, memo) * count_attention_trees(nodes - 1 - left, memo);
  memo[nodes] = total;
  return total;
}

long count_layout_trees(int max_nodes) {
  std::map<int, long> memo;
  long total = 0;
  for (int n = 2; n <= max_nodes; ++n) {
    total += 3 * count_attention_trees(n - 1, memo);  // exist, count, describe roots
    for (int left = 1; left <= n - 2; ++left)         // eq_count, more, less, compare roots
      total +=
          4 * count_attention_trees(left, memo) * count_attention_trees(n - 1 - left, memo);
  }
  return total;
}

}  // namespace

TEST_CASE("token table matches the module inventory") {
  CHECK(token_info(F).arity == 0);
  CHECK(token_info(F).uses_text);
  CHECK(token_info(AND).arity == 2);
  CHECK_FALSE(token_info(AND).uses_text);
  CHECK(token_info(EX).output == OutputKind::Answer);
  CHECK(token_info(CNT).output == OutputKind::Answer);
  CHECK(token_info(DSC).uses_text);
  CHECK(token_info(CMP).arity == 2);
  CHECK(token_info(CMP).uses_text);
  CHECK(token_info(LayoutToken::EqCount).arity == 2);
  CHECK_FALSE(token_info(LayoutToken::EqCount).uses_text);
  CHECK(std::string(token_name(LayoutToken::EqCount)) == "eq_count");
  CHECK(token_by_name("relocate") == R);
  CHECK_FALSE(token_by_name("frobnicate").has_value());
}

TEST_CASE("validate_rpn: examples") {
  Layout l = validate_rpn({F, CNT});
  CHECK(l.root == 1);
  CHECK(l.tree[1].token == CNT);
  CHECK(l.tree[1].children == std::vector<int>{0});

  CHECK_THROWS_AS(validate_rpn({CNT}), LayoutError);
  try {
    validate_rpn({CNT});
  } catch (const LayoutError& e) {
    CHECK(e.kind == LayoutError::Kind::Underflow);
    CHECK(e.position == 0);
  }

  Layout l2 = validate_rpn({F, F, AND, EX});
  CHECK(l2.tree[3].token == EX);
  CHECK(l2.tree[2].children == std::vector<int>{0, 1});

  try {
    validate_rpn({F, EX, CNT});
    FAIL("expected AnswerConsumed");
  } catch (const LayoutError& e) {
    CHECK(e.kind == LayoutError::Kind::AnswerConsumed);
    CHECK(e.position == 2);
  }
  try {
    validate_rpn({F, EX, F, EX});  // two answer roots
    FAIL("expected error");
  } catch (const LayoutError& e) {
    CHECK(e.kind == LayoutError::Kind::MultipleRoots);
  }
  try {
    validate_rpn({F, F});
    FAIL("expected MultipleRoots");
  } catch (const LayoutError& e) {
    CHECK(e.kind == LayoutError::Kind::MultipleRoots);
  }
  try {
    validate_rpn({F});
    FAIL("expected NonAnswerRoot");
  } catch (const LayoutError& e) {
    CHECK(e.kind == LayoutError::Kind::NonAnswerRoot);
  }
  CHECK_THROWS_AS(validate_rpn({}), LayoutError);
}

TEST_CASE("validate_rpn agrees with the independent oracle on all short sequences") {
  for (int len = 1; len <= 5; ++len) {
    all_sequences(len, [&](const Tokens& seq) {
      bool lib;
      try {
        validate_rpn(seq);
        lib = true;
      } catch (const LayoutError&) {
        lib = false;
      }
      REQUIRE(lib == oracle_valid(seq));
    });
  }
}

TEST_CASE("rpn/tree conversions are mutually inverse") {
  // count(relocate(find())) <-> [find, relocate, count]
  Tokens seq = {F, R, CNT};
  auto tree = rpn_to_tree(seq);
  CHECK(tree[2].token == CNT);
  CHECK(tree[2].children == std::vector<int>{1});
  CHECK(tree[1].children == std::vector<int>{0});
  CHECK(tree_to_rpn(tree, 2) == seq);

  // a single find is a fine tree but not a valid layout
  auto single = rpn_to_tree({F});
  CHECK(tree_to_rpn(single, 0) == Tokens{F});
  CHECK_THROWS_AS(validate_rpn({F}), LayoutError);

  // compare(filter(relocate(find)), relocate(find)) against a hand post-order
  Tokens big = {F, R, FIL, F, R, CMP};
  auto btree = rpn_to_tree(big);
  CHECK(btree[5].token == CMP);
  CHECK(btree[5].children == std::vector<int>{2, 4});
  CHECK(tree_to_rpn(btree, 5) == big);
}

TEST_CASE("round trip over every valid layout up to length 8") {
  auto layouts = enumerate_valid_layouts(8);
  CHECK(layouts.size() > 100);
  for (const auto& seq : layouts) {
    Layout l = validate_rpn(seq);
    CHECK(tree_to_rpn(l.tree, l.root) == seq);
  }
}

TEST_CASE("stack depth of valid layouts is bounded by ceil(len/2)") {
  for (const auto& seq : enumerate_valid_layouts(8)) {
    int depth = 0, peak = 0;
    for (LayoutToken t : seq) {
      depth += 1 - token_info(t).arity;
      peak = std::max(peak, depth);
    }
    CHECK(peak <= (static_cast<int>(seq.size()) + 1) / 2);
  }
}

TEST_CASE("enumerate_valid_layouts: counts and guards") {
  CHECK(enumerate_valid_layouts(1).empty());

  auto two = enumerate_valid_layouts(2);
  CHECK(two == std::set<Tokens>{{F, EX}, {F, CNT}, {F, DSC}});

  // agreement with brute force over all sequences
  for (int max_len = 2; max_len <= 5; ++max_len) {
    std::set<Tokens> brute;
    for (int len = 1; len <= max_len; ++len)
      all_sequences(len, [&](const Tokens& seq) {
        if (oracle_valid(seq)) brute.insert(seq);
      });
    CHECK(enumerate_valid_layouts(max_len) == brute);
  }

  // agreement with the recursive tree-counting oracle
  for (int max_len = 2; max_len <= 8; ++max_len)
    CHECK(static_cast<long>(enumerate_valid_layouts(max_len).size()) ==
          count_layout_trees(max_len));

  CHECK_THROWS_AS(enumerate_valid_layouts(13), std::invalid_argument);
}

TEST_CASE("feasibility_mask: examples") {
  auto empty = feasibility_mask({}, 9);
  for (int t = 0; t < kDecoderVocab; ++t) CHECK(empty[t] == (t == static_cast<int>(F)));

  auto done = feasibility_mask({F, CNT}, 9);
  for (int t = 0; t < kDecoderVocab; ++t) CHECK(done[t] == (t == kEosId));

  // dead-end prefixes raise
  CHECK_THROWS_AS(feasibility_mask({F, CNT, CNT}, 9), LayoutError);
}

TEST_CASE("feasibility_mask agrees with brute-force reachability") {
  const int max_len = 6;
  auto valid = enumerate_valid_layouts(max_len);
  std::set<Tokens> reachable;  // proper prefixes of valid layouts, plus the layouts
  for (const auto& seq : valid) {
    Tokens prefix;
    reachable.insert(prefix);
    for (LayoutToken t : seq) {
      prefix.push_back(t);
      reachable.insert(prefix);
    }
  }
  for (const auto& prefix : reachable) {
    const bool complete = valid.count(prefix) > 0;
    if (complete) continue;  // masks of complete layouts checked below
    auto mask = feasibility_mask(prefix, max_len);
    CHECK_FALSE(mask[kEosId]);
    for (int t = 0; t < kNumModuleTokens; ++t) {
      Tokens next = prefix;
      next.push_back(static_cast<LayoutToken>(t));
      CHECK(mask[t] == (reachable.count(next) > 0));
    }
  }
  for (const auto& seq : valid) {
    auto mask = feasibility_mask(seq, max_len);
    CHECK(mask[kEosId]);
    for (int t = 0; t < kNumModuleTokens; ++t) CHECK_FALSE(mask[t]);
  }
}

TEST_CASE("masked uniform decoding always yields valid layouts") {
  Rng rng(909);
  for (int trial = 0; trial < 500; ++trial) {
    const int t_max = 2 + static_cast<int>(rng.below(8));
    Tokens seq;
    while (true) {
      auto mask = feasibility_mask(seq, t_max);
      std::vector<int> options;
      for (int t = 0; t < kDecoderVocab; ++t)
        if (mask[t]) options.push_back(t);
      const int pick = options[rng.below(options.size())];
      if (pick == kEosId) break;
      seq.push_back(static_cast<LayoutToken>(pick));
      REQUIRE(static_cast<int>(seq.size()) <= t_max);
    }
    CHECK_NOTHROW(validate_rpn(seq));
  }
}

TEST_CASE("layout text syntax round trips") {
  CHECK(tokens_to_text({F, F, R, AND, EX}) == "exist(and(find(),relocate(find())))");
  CHECK(parse_layout_text("exist(and(find(),relocate(find())))") == Tokens{F, F, R, AND, EX});
  CHECK(parse_layout_text(" count( find() ) ") == Tokens{F, CNT});

  for (const auto& seq : enumerate_valid_layouts(6))
    CHECK(parse_layout_text(tokens_to_text(seq)) == seq);

  CHECK_THROWS_AS(parse_layout_text("exist(find)"), LayoutError);          // missing parens
  CHECK_THROWS_AS(parse_layout_text("exist(frob())"), LayoutError);        // unknown module
  CHECK_THROWS_AS(parse_layout_text("and(find(),find())x"), LayoutError);  // trailing junk
  CHECK_THROWS_AS(parse_layout_text("relocate()"), LayoutError);           // arity mismatch
}
