#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>

namespace cellflow {

/// States of the transducer. Idle is both the start and the end state.
enum class AgentState { Idle, Plan, Exec, Debug, Filter };

/// Canonical action signals, one alphabet per functional stage.
enum class Signal {
    AdvanceNextStep,
    IterateCurrentStep,
    FulfilInstruction,
    Await,
    EndStep,
    EndDebug,
    DebugFailure,
    DebugSuccess,
};

inline constexpr std::array<AgentState, 5> kAllStates = {
    AgentState::Idle, AgentState::Plan, AgentState::Exec, AgentState::Debug, AgentState::Filter};

inline constexpr std::array<Signal, 8> kAllSignals = {
    Signal::AdvanceNextStep, Signal::IterateCurrentStep, Signal::FulfilInstruction,
    Signal::Await,           Signal::EndStep,            Signal::EndDebug,
    Signal::DebugFailure,    Signal::DebugSuccess};

std::string_view to_string(AgentState s);
std::string_view to_string(Signal s);
std::optional<AgentState> state_from_string(std::string_view s);
std::optional<Signal> signal_from_string(std::string_view s);

/// Canonical token, e.g. "<Advance_to_Next_Step>".
std::string_view canonical_token(Signal s);

/// A parsed signal: the canonical value plus the literal token that produced it.
struct ActionSignal {
    Signal canonical;
    std::string raw;

    friend bool operator==(const ActionSignal&, const ActionSignal&) = default;
};

}  // namespace cellflow
