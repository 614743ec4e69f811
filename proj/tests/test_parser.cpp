#include <gtest/gtest.h>

#include <random>

#include "cellflow/action_parser.hpp"
#include "cellflow/fst.hpp"
#include "cellflow/prompts.hpp"
#include "cellflow/render.hpp"
#include "support.hpp"

using namespace cellflow;
using cftest::md;
using cftest::py;

namespace {

const SignalAliasTable kAliases = SignalAliasTable::standard();

ParseErrorKind error_of(const std::string& text, AgentState stage, ParseOptions opts = {}) {
    try {
        parse_action(text, stage, kAliases, opts);
    } catch (const ParseError& e) {
        return e.code();
    }
    ADD_FAILURE() << "no parse error for: " << text;
    return ParseErrorKind::NoSignal;
}

}  // namespace

TEST(Parser, PromptSpellingsMapToCanonicalSignals) {
    const auto a = parse_action("<Advance to Next STEP>\n" + md("[STEP GOAL]: load") + py("x = 1"), AgentState::Plan,
                                kAliases);
    EXPECT_EQ(a.signal.canonical, Signal::AdvanceNextStep);
    EXPECT_EQ(a.signal.raw, "<Advance to Next STEP>");
    ASSERT_EQ(a.cells.size(), 2u);
    EXPECT_EQ(a.cells[0].kind, CellKind::Markdown);
    EXPECT_EQ(step_goal_of(a.cells[0]), "load");
    EXPECT_EQ(a.cells[1].kind, CellKind::Code);
    EXPECT_EQ(a.cells[1].source, "x = 1");
    EXPECT_EQ(a.cells[1].origin, Origin::Plan);

    EXPECT_EQ(parse_action("<Fulfill USER INSTRUCTION>\n" + md("done"), AgentState::Plan, kAliases).signal.canonical,
              Signal::FulfilInstruction);
    EXPECT_EQ(parse_action("<await>\n" + py("1"), AgentState::Exec, kAliases).signal.canonical, Signal::Await);
    EXPECT_EQ(parse_action("<end_step>", AgentState::Exec, kAliases).signal.canonical, Signal::EndStep);
    EXPECT_EQ(parse_action("<end_debug>", AgentState::Debug, kAliases).signal.canonical, Signal::EndDebug);
    EXPECT_EQ(parse_action("<debug_success>\n" + py("y=1"), AgentState::Filter, kAliases).signal.canonical,
              Signal::DebugSuccess);
    EXPECT_EQ(parse_action("<debug_failure>\n" + md("why"), AgentState::Filter, kAliases).signal.canonical,
              Signal::DebugFailure);
}

TEST(Parser, EveryOfferedSignalIsRecognized) {
    const auto catalog = PromptCatalog::builtin();
    EXPECT_EQ(catalog.offered_signals(PromptKind::Planning, kAliases),
              (std::set<Signal>{Signal::AdvanceNextStep, Signal::IterateCurrentStep, Signal::FulfilInstruction}));
    EXPECT_EQ(catalog.offered_signals(PromptKind::Execution, kAliases), admissible_signals(AgentState::Exec));
    EXPECT_EQ(catalog.offered_signals(PromptKind::Debugging, kAliases), admissible_signals(AgentState::Debug));
    EXPECT_EQ(catalog.offered_signals(PromptKind::PostFiltering, kAliases), admissible_signals(AgentState::Filter));
}

TEST(Parser, CanonicalTokensAndCaseInsensitivity) {
    for (auto s : kAllSignals) EXPECT_EQ(kAliases.lookup(canonical_token(s)), s);
    EXPECT_EQ(kAliases.lookup("<AWAIT>"), Signal::Await);
    EXPECT_EQ(kAliases.lookup("<advance to next step>"), Signal::AdvanceNextStep);
    EXPECT_EQ(kAliases.lookup("<nonsense>"), std::nullopt);
}

TEST(Parser, LeadingWhitespaceIsAllowed) {
    EXPECT_EQ(parse_action("\n  <end_step>", AgentState::Exec, kAliases).signal.canonical, Signal::EndStep);
}

TEST(Parser, Errors) {
    EXPECT_EQ(error_of("Sure! Here is the code.\n<await>", AgentState::Exec), ParseErrorKind::NoSignal);
    EXPECT_EQ(error_of("", AgentState::Exec), ParseErrorKind::NoSignal);
    EXPECT_EQ(error_of("<celebrate>", AgentState::Exec), ParseErrorKind::NoSignal);
    EXPECT_EQ(error_of("<end_step>", AgentState::Debug), ParseErrorKind::InadmissibleSignal);
    EXPECT_EQ(error_of("<debug_success>\n" + py("1"), AgentState::Exec), ParseErrorKind::InadmissibleSignal);
    EXPECT_EQ(error_of("<await>", AgentState::Exec), ParseErrorKind::EmptyAction);
    EXPECT_EQ(error_of("<Advance to Next STEP>", AgentState::Plan), ParseErrorKind::EmptyAction);
    EXPECT_EQ(error_of("<Fulfill USER INSTRUCTION>\n" + py("print(1)"), AgentState::Plan),
              ParseErrorKind::UnexpectedCode);
    EXPECT_EQ(error_of("<debug_failure>\n" + py("x"), AgentState::Filter), ParseErrorKind::UnexpectedCode);
}

TEST(Parser, AllowedOverrideRestrictsSignals) {
    ParseOptions opts;
    opts.allowed = {Signal::AdvanceNextStep, Signal::FulfilInstruction};
    EXPECT_EQ(error_of("<Iterate on Current STEP>\n" + md("[STEP GOAL]: again"), AgentState::Plan, opts),
              ParseErrorKind::InadmissibleSignal);
}

TEST(Parser, ProseBecomesMarkdownAndOtherFencesStayMarkdown) {
    const auto a = parse_action("<await>\nLet me check.\n" + py("df.head()") + "```text\nraw\n```\nDone.",
                                AgentState::Exec, kAliases);
    ASSERT_EQ(a.cells.size(), 4u);
    EXPECT_EQ(a.cells[0].source, "Let me check.");
    EXPECT_TRUE(a.cells[1].is_code());
    EXPECT_EQ(a.cells[2].kind, CellKind::Markdown);
    EXPECT_EQ(a.cells[2].source, "raw");
    EXPECT_EQ(a.cells[3].source, "Done.");
}

TEST(Parser, CodeTagFollowsLanguage) {
    ParseOptions opts;
    opts.code_tag = "r";
    const auto a = parse_action("<await>\n```r\nx <- 1\n```\n" + py("x = 1"), AgentState::Exec, kAliases, opts);
    ASSERT_EQ(a.cells.size(), 2u);
    EXPECT_TRUE(a.cells[0].is_code());
    EXPECT_EQ(a.cells[0].language_tag, "r");
    EXPECT_FALSE(a.cells[1].is_code());
}

TEST(Parser, UnclosedFenceRunsToEnd) {
    const auto a = parse_action("<await>\n```python\nx = 1\ny = 2", AgentState::Exec, kAliases);
    ASSERT_EQ(a.cells.size(), 1u);
    EXPECT_EQ(a.cells[0].source, "x = 1\ny = 2");
}

TEST(Parser, StepGoalDetection) {
    EXPECT_EQ(step_goal_of(Cell::markdown("[STEP GOAL]: Load data")), "Load data");
    EXPECT_EQ(step_goal_of(Cell::markdown("## [STEP GOAL]: Plot")), "Plot");
    EXPECT_EQ(step_goal_of(Cell::markdown("Goal: nothing")), std::nullopt);
    EXPECT_EQ(step_goal_of(Cell::code("[STEP GOAL]: x")), std::nullopt);
}

namespace {

std::string random_text(std::mt19937& rng, bool allow_backticks) {
    static const std::string alphabet = "abc xyz_01\n\t()=+#[]:<>\"'";
    std::uniform_int_distribution<int> len(1, 40);
    std::uniform_int_distribution<std::size_t> pick(0, alphabet.size() - 1);
    std::string s;
    const int n = len(rng);
    for (int i = 0; i < n; ++i) s += alphabet[pick(rng)];
    if (allow_backticks && rng() % 3 == 0) s += "\n```\ninner\n```";
    // Cells are trimmed by the parser; keep generated ones trim-stable.
    const auto b = s.find_first_not_of(" \t\n");
    const auto e = s.find_last_not_of(" \t\n");
    if (b == std::string::npos) return "x";
    return s.substr(b, e - b + 1);
}

}  // namespace

TEST(Parser, RenderedActionsRoundTrip) {
    std::mt19937 rng(42);
    const std::vector<std::pair<AgentState, Signal>> choices = {
        {AgentState::Exec, Signal::Await},          {AgentState::Exec, Signal::EndStep},
        {AgentState::Debug, Signal::Await},         {AgentState::Debug, Signal::EndDebug},
        {AgentState::Plan, Signal::AdvanceNextStep}, {AgentState::Filter, Signal::DebugSuccess}};
    for (int iter = 0; iter < 500; ++iter) {
        const auto [stage, sig] = choices[rng() % choices.size()];
        std::vector<Cell> cells;
        const int n = 1 + static_cast<int>(rng() % 4);
        for (int i = 0; i < n; ++i) {
            const bool code = rng() % 2 == 0;
            auto body = random_text(rng, true);
            cells.push_back(code ? Cell::code(body) : Cell::markdown(body));
        }
        std::string text(canonical_token(sig));
        text += "\n";
        for (const auto& c : cells) {
            const auto fence = fence_for(c.source);
            text += fence + (c.is_code() ? "python" : "markdown") + "\n" + c.source + "\n" + fence + "\n";
        }
        const auto a = parse_action(text, stage, kAliases);
        EXPECT_EQ(a.signal.canonical, sig);
        ASSERT_EQ(a.cells.size(), cells.size()) << text;
        for (std::size_t i = 0; i < cells.size(); ++i) {
            EXPECT_EQ(a.cells[i].kind, cells[i].kind);
            EXPECT_EQ(a.cells[i].source, cells[i].source) << text;
            EXPECT_EQ(a.cells[i].origin, origin_for(stage));
        }
    }
}

TEST(Parser, TotalOnArbitraryInput) {
    std::mt19937 rng(9);
    const std::string alphabet = "<>`\n abcdeghinprstuw_[]:ASTEP";
    std::uniform_int_distribution<std::size_t> pick(0, alphabet.size() - 1);
    for (int iter = 0; iter < 3000; ++iter) {
        std::string s;
        const int n = static_cast<int>(rng() % 80);
        for (int i = 0; i < n; ++i) s += alphabet[pick(rng)];
        if (rng() % 4 == 0) s = "<await>" + s;
        for (auto stage : {AgentState::Plan, AgentState::Exec, AgentState::Debug, AgentState::Filter}) {
            try {
                const auto a = parse_action(s, stage, kAliases);
                EXPECT_TRUE(is_admissible(stage, a.signal.canonical));
            } catch (const ParseError&) {
            }
        }
    }
}
