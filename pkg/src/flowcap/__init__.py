"""Information-flow policies, an offline analyzer and a simulated pipeline.

The policy kernel (``flowcap.policy``, ``flowcap.lang``, ``flowcap.restrict``)
is usable on its own; the remaining modules build the simulated sandbox,
monitors and benchmark harness on top of it.
"""

from flowcap.lang import parse_policies, parse_policy, parse_rule, serialize_policies, serialize_policy
from flowcap.policy import MetadataView, MetaList, Policy, Rule, SessionContext, Taint
from flowcap.restrict import CheckResult, check_read, check_write, is_as_restr, policy_eval

__version__ = "0.1.0"

__all__ = [
    "CheckResult",
    "MetaList",
    "MetadataView",
    "Policy",
    "Rule",
    "SessionContext",
    "Taint",
    "check_read",
    "check_write",
    "is_as_restr",
    "parse_policies",
    "parse_policy",
    "parse_rule",
    "policy_eval",
    "serialize_policies",
    "serialize_policy",
]
