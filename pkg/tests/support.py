"""Helpers for assembling the demo application inside tests."""
from tandem.concepts import BUILTINS, builtin_def_path, load_builtin_spec, make_builtin_handle
from tandem.engine import Engine
from tandem.synclang import parse_syncs

DEFS = builtin_def_path("Web").parent

ORIGINAL_RULES = ("registration", "onboarding", "errors")
FIXED_RULES = ("bugfix", "onboarding", "errors")
ARTICLE_RULES = ORIGINAL_RULES + ("articles", "formatting", "moderation")


def sync_text(stem: str) -> str:
    return (DEFS / f"{stem}.sync").read_text()


def build_engine(rules=ORIGINAL_RULES, concepts=tuple(BUILTINS), version="dev", step_limit=10_000) -> Engine:
    eng = Engine(version=version, step_limit=step_limit)
    for name in concepts:
        eng.register_concept(
            load_builtin_spec(name), make_builtin_handle(name), bootstrap=(name == "Web")
        )
    for stem in rules:
        eng.register_syncs(parse_syncs(sync_text(stem)))
    diags = eng.lint()
    assert diags == [], diags  # the shipped rules must stay statically clean
    return eng


def register_payload(name="alice", email="alice@example.org", password="opensesame1"):
    return {"method": "register", "username": name, "email": email, "password": password}


def run_flow(eng: Engine, payload: dict) -> str:
    flow = eng.submit_external("Web", "request", payload)
    eng.run_to_quiescence()
    return flow


def responds(eng: Engine, flow: str) -> list:
    """Completed Web/respond records of one flow."""
    return [
        r
        for r in eng.flow_records(flow)
        if r.name == "respond" and r.concept.endswith("/Web") and r.is_completion
    ]


def respond_body(record) -> dict:
    return record.input.get("body", {})


def registered_token(eng: Engine, flow: str) -> str:
    """The bearer token a registration flow handed back."""
    (resp,) = responds(eng, flow)
    return respond_body(resp)["user"]["token"]


def seed_article(eng: Engine, title="Intro to Sync", tags=None):
    """Register a user, then publish an article through full flows.

    Returns (author flow, article flow).
    """
    f_user = run_flow(eng, register_payload())
    token = registered_token(eng, f_user)
    payload = {
        "method": "create_article",
        "title": title,
        "description": "d",
        "body": "b",
        "token": token,
    }
    if tags is not None:
        payload["tagList"] = tags
    f_article = run_flow(eng, payload)
    return f_user, f_article
