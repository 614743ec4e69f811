#include "cellflow/signals.hpp"

namespace cellflow {

std::string_view to_string(AgentState s) {
    switch (s) {
        case AgentState::Idle: return "Idle";
        case AgentState::Plan: return "Plan";
        case AgentState::Exec: return "Exec";
        case AgentState::Debug: return "Debug";
        case AgentState::Filter: return "Filter";
    }
    return "?";
}

std::string_view to_string(Signal s) {
    switch (s) {
        case Signal::AdvanceNextStep: return "AdvanceNextStep";
        case Signal::IterateCurrentStep: return "IterateCurrentStep";
        case Signal::FulfilInstruction: return "FulfilInstruction";
        case Signal::Await: return "Await";
        case Signal::EndStep: return "EndStep";
        case Signal::EndDebug: return "EndDebug";
        case Signal::DebugFailure: return "DebugFailure";
        case Signal::DebugSuccess: return "DebugSuccess";
    }
    return "?";
}

std::optional<AgentState> state_from_string(std::string_view s) {
    for (auto st : kAllStates) {
        if (to_string(st) == s) return st;
    }
    return std::nullopt;
}

std::optional<Signal> signal_from_string(std::string_view s) {
    for (auto sig : kAllSignals) {
        if (to_string(sig) == s) return sig;
    }
    return std::nullopt;
}

std::string_view canonical_token(Signal s) {
    switch (s) {
        case Signal::AdvanceNextStep: return "<Advance_to_Next_Step>";
        case Signal::IterateCurrentStep: return "<Iterate_on_the_Current_Step>";
        case Signal::FulfilInstruction: return "<Fulfil_Instruction>";
        case Signal::Await: return "<Await>";
        case Signal::EndStep: return "<End_Step>";
        case Signal::EndDebug: return "<End_Debug>";
        case Signal::DebugFailure: return "<Debug_Failure>";
        case Signal::DebugSuccess: return "<Debug_Success>";
    }
    return "<?>";
}

}  // namespace cellflow
