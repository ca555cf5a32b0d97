"""Scenario runner and benchmark suite.

A scenario is canonical JSON::

    {"seed": 42,
     "actors": [{"name": "alice", "role": "Patient", "identity": "id:alice"}, ...],
     "steps": [{"flow": "onboard", "actor": "alice"},
               {"flow": "prescription", "doctor": "bob", "patient": "alice",
                "claims": {...}, "save": "rx", "expect": {"success": true}}, ...],
     "assertions": [{"check": "security_records", "equals": 1}, ...]}

String parameters of the form ``"$name.key"`` refer to the ``data`` of an
earlier step saved under ``name``. A step may carry ``expect`` (dotted paths
into the outcome) or ``expect_error`` (an error code).
"""

from __future__ import annotations

import csv
import io
import math
import statistics
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Callable

from ssi_ehr import flows
from ssi_ehr.agents import MediatorNotice, pack_envelope, unpack_envelope
from ssi_ehr.credentials import VerifiableCredential, issue_vc, verify_vc
from ssi_ehr.crypto import generate_keypair
from ssi_ehr.encoding import canonical_json, load_json
from ssi_ehr.errors import MalformedPayload, ScenarioParseError, SsiError
from ssi_ehr.identity import DidKind, create_did
from ssi_ehr.ledger import CertificateRequest, Role
from ssi_ehr.flows import FlowOutcome, World, WallClock

EXIT_OK, EXIT_ASSERT, EXIT_USAGE = 0, 1, 2

# flow name -> (required parameters, optional parameters)
STEP_SCHEMA: dict[str, tuple[tuple[str, ...], tuple[str, ...]]] = {
    "onboard": (("actor",), ()),
    "connect": (("inviter", "responder"), ("inviter_alias", "responder_alias", "authenticate_inviter")),
    "prescription": (("doctor", "patient", "claims"), ()),
    "lab_result": (("lab", "patient", "prescription", "claims"), ()),
    "verify_vc": (("verifier", "holder", "cid"), ()),
    "share_local": (("patient", "practitioner", "claims"), ("cids", "ttl", "scan_delay")),
    "share_cloud": (("patient", "practitioner", "claims", "ttl"), ("cids",)),
    "fetch_shared": (("practitioner", "patient", "vp_id"), ()),
    "revoke_access": (("patient", "practitioner", "vp_id"), ()),
    "revoke_vc": (("issuer", "cid"), ()),
    "recovery_setup": (("patient", "contacts"), ("share_contact_list",)),
    "register_contacts": (("patient", "contacts"), ()),
    "backup": (("patient",), ()),
    "destroy_wallet": (("actor",), ()),
    "recover_wallet": (("actor", "identity", "contact"), ()),
    "emergency": (("doctor", "patient_identity"), ("ping_budget",)),
    "set_available": (("actor", "available"), ()),
    "advance": (("seconds",), ()),
}
ACTOR_PARAMS = {
    "actor", "inviter", "responder", "doctor", "patient", "lab",
    "verifier", "holder", "practitioner", "issuer", "contact",
}
STEP_META = {"flow", "save", "expect", "expect_error", "note"}
CHECKS = {"security_records", "pending_notices", "share_separation", "connections", "credentials"}
ROLES = {r.value for r in Role if r is not Role.MSP}


@dataclass
class ScenarioScript:
    seed: int
    actors: list[dict]
    steps: list[dict]
    assertions: list[dict]
    name: str = "scenario"


def parse_scenario(data: bytes | str, name: str = "scenario") -> ScenarioScript:
    """Validate a script completely before anything runs."""
    try:
        raw = load_json(data.encode() if isinstance(data, str) else data)
    except MalformedPayload as exc:
        raise ScenarioParseError(f"{name}: not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ScenarioParseError(f"{name}: top level must be an object")
    unknown = set(raw) - {"seed", "actors", "steps", "assertions", "name", "description"}
    if unknown:
        raise ScenarioParseError(f"{name}: unknown top-level keys {sorted(unknown)}")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise ScenarioParseError(f"{name}: seed must be a 64-bit unsigned integer")
    actors = raw.get("actors", [])
    names = set()
    for actor in actors:
        if not isinstance(actor, dict) or "name" not in actor or "role" not in actor:
            raise ScenarioParseError(f"{name}: actor entries need name and role: {actor!r}")
        if actor["role"] not in ROLES:
            raise ScenarioParseError(f"{name}: actor {actor['name']!r} has invalid role {actor['role']!r}")
        if actor["name"] in names:
            raise ScenarioParseError(f"{name}: duplicate actor {actor['name']!r}")
        names.add(actor["name"])
    steps = raw.get("steps")
    if not isinstance(steps, list) or not steps:
        raise ScenarioParseError(f"{name}: steps must be a non-empty list")
    for i, step in enumerate(steps):
        if not isinstance(step, dict) or "flow" not in step:
            raise ScenarioParseError(f"{name}: step {i} has no flow")
        schema = STEP_SCHEMA.get(step["flow"])
        if schema is None:
            raise ScenarioParseError(f"{name}: step {i} references unknown flow {step['flow']!r}")
        required, optional = schema
        missing = [k for k in required if k not in step]
        extra = set(step) - set(required) - set(optional) - STEP_META
        if missing or extra:
            raise ScenarioParseError(
                f"{name}: step {i} ({step['flow']}) missing {missing} unexpected {sorted(extra)}"
            )
        refs = [step[k] for k in ACTOR_PARAMS if k in step] + list(step.get("contacts", []))
        strangers = [r for r in refs if r not in names]
        if strangers:
            raise ScenarioParseError(f"{name}: step {i} names unknown actors {strangers}")
    assertions = raw.get("assertions", [])
    for a in assertions:
        if not isinstance(a, dict) or a.get("check") not in CHECKS:
            raise ScenarioParseError(f"{name}: unknown assertion {a!r}")
    return ScenarioScript(seed, actors, steps, assertions, raw.get("name", name))


def bundled_scenario(filename: str) -> bytes:
    return resources.files("ssi_ehr").joinpath("scenarios", filename).read_bytes()


# -- running --------------------------------------------------------------------------


class _AssertionFailed(Exception):
    pass


def _lookup(obj: Any, path: str) -> Any:
    for part in path.split("."):
        if isinstance(obj, dict) and part in obj:
            obj = obj[part]
        elif isinstance(obj, list) and part.isdigit() and int(part) < len(obj):
            obj = obj[int(part)]
        else:
            raise KeyError(path)
    return obj


class ScenarioRunner:
    def __init__(self, script: ScenarioScript, seed: int | None = None):
        self.script = script
        self.world = World(seed=script.seed if seed is None else seed)
        self.actors = {a["name"]: a for a in script.actors}
        self.saved: dict[str, dict] = {}
        self.transcript: list[dict] = []

    def _resolve(self, value: Any) -> Any:
        if isinstance(value, str) and value.startswith("$"):
            ref, _, path = value[1:].partition(".")
            if ref not in self.saved:
                raise _AssertionFailed(f"reference {value!r} to an unsaved step")
            try:
                return _lookup(self.saved[ref], path) if path else self.saved[ref]
            except KeyError:
                raise _AssertionFailed(f"reference {value!r} does not resolve") from None
        if isinstance(value, list):
            return [self._resolve(v) for v in value]
        if isinstance(value, dict):
            return {k: self._resolve(v) for k, v in value.items()}
        return value

    def _wallet(self, name: str):
        if name not in self.actors:
            raise _AssertionFailed(f"unknown actor {name!r}")
        return self.world.wallet(name)

    def _dispatch(self, flow: str, p: dict) -> FlowOutcome:
        w, W = self.world, self._wallet
        if flow == "onboard":
            actor = self.actors[p["actor"]] if p["actor"] in self.actors else None
            if actor is None:
                raise _AssertionFailed(f"unknown actor {p['actor']!r}")
            return flows.flow_onboard(w, W(p["actor"]), actor["role"], actor.get("identity"))
        if flow == "connect":
            return flows.flow_connect(
                w, W(p["inviter"]), W(p["responder"]),
                inviter_alias=p.get("inviter_alias", p["responder"]),
                responder_alias=p.get("responder_alias", p["inviter"]),
                authenticate_inviter=bool(p.get("authenticate_inviter", False)),
            )
        if flow == "prescription":
            return flows.flow_prescription(w, W(p["doctor"]), W(p["patient"]), p["claims"])
        if flow == "lab_result":
            return flows.flow_lab_result(w, W(p["lab"]), W(p["patient"]), p["prescription"], p["claims"])
        if flow == "verify_vc":
            return self._verify_vc(W(p["verifier"]), W(p["holder"]), p["cid"])
        if flow == "share_local":
            return flows.flow_share_local(
                w, W(p["patient"]), W(p["practitioner"]), p["claims"],
                cids=p.get("cids"), ttl=p.get("ttl"), scan_delay=p.get("scan_delay", 0),
            )
        if flow == "share_cloud":
            return flows.flow_share_cloud(
                w, W(p["patient"]), W(p["practitioner"]), p["claims"], p["ttl"], cids=p.get("cids")
            )
        if flow == "fetch_shared":
            return flows.flow_fetch_shared(w, W(p["practitioner"]), W(p["patient"]), p["vp_id"])
        if flow == "revoke_access":
            return flows.flow_revoke_access(w, W(p["patient"]), W(p["practitioner"]), p["vp_id"])
        if flow == "revoke_vc":
            return flows.flow_revoke_vc(w, W(p["issuer"]), p["cid"])
        if flow == "recovery_setup":
            return flows.flow_recovery_setup(
                w, W(p["patient"]), [W(c) for c in p["contacts"]],
                share_contact_list=bool(p.get("share_contact_list", False)),
            )
        if flow == "register_contacts":
            return flows.flow_register_contacts(w, W(p["patient"]), [W(c) for c in p["contacts"]])
        if flow == "backup":
            return flows.flow_backup(w, W(p["patient"]))
        if flow == "destroy_wallet":
            out = FlowOutcome("destroy_wallet", success=True)
            w.wallets.pop(p["actor"], None)
            out.step(p["actor"], "destroy_wallet")
            return out
        if flow == "recover_wallet":
            out, _ = flows.flow_recover_wallet(w, p["actor"], p["identity"], W(p["contact"]))
            return out
        if flow == "emergency":
            return flows.flow_emergency_access(
                w, W(p["doctor"]), p["patient_identity"], ping_budget=p.get("ping_budget")
            )
        if flow == "set_available":
            out = FlowOutcome("set_available", success=True)
            W(p["actor"]).emergency_available = bool(p["available"])
            out.step(p["actor"], "set_available", bool(p["available"]))
            return out
        if flow == "advance":
            out = FlowOutcome("advance", success=True)
            out.step("clock", "advance", w.clock.advance(int(p["seconds"])))
            return out
        raise ScenarioParseError(f"unknown flow {flow!r}")  # pragma: no cover

    def _verify_vc(self, verifier, holder, cid: str) -> FlowOutcome:
        """Verifier checks a credential the holder sent, against the ledger."""
        out = FlowOutcome("verify_vc")
        vc = VerifiableCredential.from_dict(holder.credential(cid).to_dict())
        issuer_doc = self.world.ledger.get_did(vc.issuer_did)
        out.step(verifier.label, "resolve_issuer_did", issuer_doc.did)
        report = verify_vc(vc, self.world.ledger, self.world.now(), witness=self.world)
        out.step(verifier.label, "verify_vc", "valid" if report.valid else "invalid")
        out.success = report.valid
        out.data = {"cid": cid, "report": report.to_dict()}
        return out

    def _check_step(self, i: int, step: dict, outcome: dict | None, error: SsiError | None) -> None:
        flow = step["flow"]
        want_error = step.get("expect_error")
        if error is not None:
            if want_error is None:
                raise _AssertionFailed(f"step {i} ({flow}) raised {error.code}: {error}")
            if error.code != want_error:
                raise _AssertionFailed(f"step {i} ({flow}) raised {error.code}, expected {want_error}")
            return
        if want_error is not None:
            raise _AssertionFailed(f"step {i} ({flow}) succeeded, expected error {want_error}")
        for path, expected in step.get("expect", {}).items():
            try:
                actual = _lookup(outcome, path)
            except KeyError:
                raise _AssertionFailed(f"step {i} ({flow}): no field {path!r}") from None
            if actual != expected:
                raise _AssertionFailed(f"step {i} ({flow}): {path} = {actual!r}, expected {expected!r}")

    def _pending_notices(self, name: str, kind: str | None) -> int:
        wallet = self.world.wallets.get(name)
        if wallet is None:
            return 0
        count = sum(1 for n in wallet.notices if kind is None or n["kind"] == kind)
        for conn in wallet.connections.values():
            for item in self.world.mediator.pending(conn.my_did):
                if isinstance(item, MediatorNotice) and (kind is None or item.kind == kind):
                    count += 1
        return count

    def _assertion(self, a: dict) -> tuple[Any, bool]:
        check = a["check"]
        if check == "security_records":
            value = self.world.ledger.count_emergency_records()
        elif check == "pending_notices":
            value = self._pending_notices(a["actor"], a.get("kind"))
        elif check == "share_separation":
            return self.world.share_violations(), not self.world.share_violations()
        elif check == "connections":
            value = len(self.world.wallet(a["actor"]).connections)
        else:
            value = len(self.world.wallet(a["actor"]).credentials)
        ok = True
        if "equals" in a:
            ok &= value == a["equals"]
        if "min" in a:
            ok &= value >= a["min"]
        return value, ok

    def run(self) -> int:
        for i, step in enumerate(self.script.steps):
            flow = step["flow"]
            params = {k: v for k, v in step.items() if k not in STEP_META}
            outcome = error = None
            try:
                params = self._resolve(params)
                result = self._dispatch(flow, params)
                outcome = result.to_dict()
                if "save" in step:
                    self.saved[step["save"]] = outcome["data"]
            except SsiError as exc:
                error = exc
            except _AssertionFailed as exc:
                return self._fail(i, flow, str(exc))
            line = {"step": i, "flow": flow}
            if error is not None:
                line["error"] = error.code
                line["message"] = str(error)
            else:
                line.update(outcome)
            self.transcript.append(line)
            try:
                self._check_step(i, step, outcome, error)
            except _AssertionFailed as exc:
                return self._fail(i, flow, str(exc))
        for j, a in enumerate(self.script.assertions):
            value, ok = self._assertion(a)
            self.transcript.append({"assertion": j, "check": a["check"], "value": value, "ok": ok})
            if not ok:
                return self._fail(None, a["check"], f"assertion {j} ({a['check']}) failed: got {value!r}")
        self.transcript.append({"result": "pass", "scenario": self.script.name})
        return EXIT_OK

    def _fail(self, index: int | None, what: str, message: str) -> int:
        self.transcript.append(
            {"result": "fail", "scenario": self.script.name, "step": index, "at": what, "message": message}
        )
        return EXIT_ASSERT

    def snapshot(self) -> dict:
        return {
            "ledger": self.world.ledger.snapshot(),
            "mediator": self.world.mediator.snapshot(),
        }


def run_scenario(
    source: str | Path | bytes, seed: int | None = None
) -> tuple[int, list[dict], ScenarioRunner | None]:
    """Run a script file (or its raw bytes); returns (exit code, transcript, runner)."""
    try:
        if isinstance(source, bytes):
            data, name = source, "scenario"
        else:
            path = Path(source)
            data, name = path.read_bytes(), path.name
    except OSError as exc:
        return EXIT_USAGE, [{"result": "error", "message": f"cannot read {source}: {exc}"}], None
    try:
        script = parse_scenario(data, name)
    except ScenarioParseError as exc:
        return EXIT_USAGE, [{"result": "error", "code": exc.code, "message": str(exc)}], None
    runner = ScenarioRunner(script, seed)
    code = runner.run()
    return code, runner.transcript, runner


def transcript_lines(transcript: list[dict]) -> str:
    return "".join(canonical_json(line).decode() + "\n" for line in transcript)


# -- benchmarks -------------------------------------------------------------------------

BENCH_OPS = (
    "create_did",
    "create_vc",
    "verify_vc",
    "exchange_message",
    "connect",
    "read_did",
    "write_did",
)
CSV_HEADER = ("op", "iters", "mean_ms", "p50_ms", "p95_ms", "tps")
LEDGER_OPS = {"read_did", "write_did"}


@dataclass
class BenchReport:
    op: str
    iters: int
    mean_ms: float
    p50_ms: float
    p95_ms: float
    tps: float | None = None
    error: str | None = None

    def row(self) -> list[str]:
        def fmt(x):
            if x is None:
                return ""
            return "nan" if isinstance(x, float) and math.isnan(x) else f"{x:.4f}"

        return [self.op, str(self.iters), fmt(self.mean_ms), fmt(self.p50_ms), fmt(self.p95_ms), fmt(self.tps)]


def percentile(samples: list[float], q: float) -> float:
    """Linear-interpolated percentile, q in [0, 100]."""
    if not samples:
        return math.nan
    ordered = sorted(samples)
    pos = (len(ordered) - 1) * q / 100
    lo = math.floor(pos)
    hi = min(lo + 1, len(ordered) - 1)
    return ordered[lo] + (ordered[hi] - ordered[lo]) * (pos - lo)


def summarize(op: str, samples_s: list[float], elapsed_s: float | None = None) -> BenchReport:
    ms = [s * 1000 for s in samples_s]
    tps = None
    if op in LEDGER_OPS:
        tps = len(ms) / elapsed_s if elapsed_s else math.nan
    return BenchReport(op, len(ms), statistics.fmean(ms), percentile(ms, 50), percentile(ms, 95), tps)


def _bench_world() -> tuple[World, Any, Any, Any]:
    """A wall-clock world with a practitioner and a patient already connected."""
    world = World(seed=None, clock=WallClock())
    doctor, patient = world.wallet("doctor"), world.wallet("patient")
    flows.flow_onboard(world, doctor, Role.PRACTITIONER.value)
    flows.flow_onboard(world, patient, Role.PATIENT.value)
    flows.flow_connect(world, patient, doctor, inviter_alias="doctor", responder_alias="patient")
    return world, doctor, patient, world.mediator


def _setup(op: str, iters: int) -> Callable[[int], Any]:
    """Build the fixture for ``op`` and return the per-iteration callable."""
    world, doctor, patient, mediator = _bench_world()
    ledger = world.ledger
    claims = {"diagnosis": "J06.9", "prescription": "amoxicillin 500mg"}
    if op == "create_did":
        def call(i):
            return create_did(DidKind.ANYWISE, generate_keypair(), mediator.endpoint, i)
        return call
    if op == "create_vc":
        def call(i):
            return issue_vc(doctor, patient.anywise_did, claims, ledger=ledger, now=world.now())
        return call
    if op == "verify_vc":
        vc = issue_vc(doctor, patient.anywise_did, claims, ledger=ledger, now=world.now())

        def call(i):
            report = verify_vc(vc, ledger, world.now(), witness=world)
            if not report.valid:
                raise SsiError(f"verification failed: {report.problems}")
        return call
    if op == "exchange_message":
        d_alias, p_alias = flows.link(doctor, patient)

        def call(i):
            env = pack_envelope(doctor, d_alias, {"type": "ping", "n": i})
            mediator.deliver(env)
            (got,) = mediator.pickup(env.to_did)
            unpack_envelope(patient, got)
        return call
    if op == "connect":
        def call(i):
            flows.flow_connect(
                world, patient, doctor, inviter_alias=f"d{i}", responder_alias=f"p{i}"
            )
        return call
    if op == "read_did":
        did = doctor.anywise_did

        def call(i):
            return ledger.get_did(did)
        return call
    if op == "write_did":
        # certificates are issued up front; only the ledger write is timed
        prepared = []
        for i in range(iters):
            keypair = generate_keypair()
            did, doc = create_did(DidKind.ANYWISE, keypair, mediator.endpoint, i)
            csr = CertificateRequest(doc, keypair.public_key, Role.PATIENT.value).signed(keypair)
            auth = world.msp.authorize(world.ca.issue_certificate(csr, world.now()), world.now())
            prepared.append((auth.identity, did, doc))

        def call(i):
            identity, did, doc = prepared[i]
            return ledger.put_did(identity, did, doc)
        return call
    raise ValueError(f"unknown bench op {op!r}")


def bench_op(op: str, iters: int, tps: float | None = None) -> BenchReport:
    """Time ``iters`` calls of one op; ``tps`` paces submissions on a fixed schedule.

    Call i starts no earlier than start + i/tps. An op that falls behind runs
    back to back until it is on schedule again, so the reported rate is the
    committed throughput over the whole run.
    """
    if op not in BENCH_OPS:
        raise ValueError(f"unknown bench op {op!r}")
    try:
        call = _setup(op, iters)
        samples = []
        interval = 1.0 / tps if tps else 0.0
        start = time.perf_counter()
        for i in range(iters):
            if interval:
                delay = start + i * interval - time.perf_counter()
                if delay > 0:
                    time.sleep(delay)
            t0 = time.perf_counter()
            call(i)
            samples.append(time.perf_counter() - t0)
        elapsed = time.perf_counter() - start
    except Exception as exc:  # a failing op becomes a NaN row, never a crash
        nan = math.nan
        return BenchReport(op, iters, nan, nan, nan, nan if op in LEDGER_OPS else None, str(exc))
    return summarize(op, samples, elapsed)


def run_bench(
    ops: list[str] | None = None, iterations: int = 10_000, tps_target: float | None = None
) -> list[BenchReport]:
    """One report per op; with zero iterations there are no rows at all."""
    ops = list(ops or BENCH_OPS)
    unknown = [op for op in ops if op not in BENCH_OPS]
    if unknown:
        raise ValueError(f"unknown bench ops {unknown}; choose from {', '.join(BENCH_OPS)}")
    if iterations <= 0:
        return []
    return [
        bench_op(op, iterations, tps_target if op == "write_did" else None) for op in ops
    ]


def reports_to_csv(reports: list[BenchReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in reports:
        writer.writerow(r.row())
    return buf.getvalue()
