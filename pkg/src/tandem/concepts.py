"""Built-in concept implementations and the handle interface the engine calls.

Each handle owns one state graph and exposes do_<action> methods taking the
input record and the action-record id. Anything that must be fresh (salts,
tokens, request ids) is derived from that record id, so replaying the same
records rebuilds identical state.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

from tandem.core import NIL, Ref, derive_id, derive_token, to_jsonable
from tandem.speclang import ConceptSpec, parse_concept
from tandem.store import GraphView, Namespace

_DEFS = Path(__file__).resolve().parent / "defs"


class ConceptError(Exception):
    pass


class ConceptHandle:
    """Base runtime for one concept: state access plus action dispatch."""

    def __init__(self) -> None:
        self.view: GraphView | None = None
        self.ns: Namespace | None = None

    def attach(self, view: GraphView, ns: Namespace) -> None:
        self.view = view
        self.ns = ns

    def pred(self, prop: str) -> str:
        return self.ns.predicate(prop)

    def invoke(self, action: str, inputs: dict, record_id: str) -> dict:
        method = getattr(self, "do_" + action, None)
        if method is None:
            raise ConceptError(f"unimplemented action: {action}")
        return method(dict(inputs), record_id)


def _non_empty(value) -> bool:
    return isinstance(value, str) and bool(value.strip())


class WebConcept(ConceptHandle):
    """Bootstrap concept: every flow starts with one of its completions."""

    def do_request(self, inputs, record_id):
        request = Ref(derive_id(record_id, "request"))
        self.view.add(request.iri, self.pred("requests"), True)
        return {"request": request}

    def do_respond(self, inputs, record_id):
        request = inputs.get("request")
        if not isinstance(request, Ref):
            return {"error": "respond needs a request reference"}
        if self.view.has(request.iri, self.pred("response")):
            return {"error": "request already answered"}
        payload = {k: v for k, v in inputs.items() if k != "request"}
        self.view.set(request.iri, self.pred("response"),
                      json.dumps(to_jsonable(payload), sort_keys=True))
        return {"request": request}

    def do_format(self, inputs, record_id):
        return dict(inputs)

    def response_for(self, request: Ref):
        """The stored respond payload, decoded, or None while unanswered."""
        raw = self.view.value(request.iri, self.pred("response"))
        return None if raw is None else json.loads(raw)


class UserConcept(ConceptHandle):
    def _taken(self, prop: str, value: str, but: str) -> bool:
        return any(s != but for s in self.view.subjects(self.pred(prop), value))

    def do_register(self, inputs, record_id):
        user, name, email = inputs["user"], inputs["name"], inputs["email"]
        if not _non_empty(name):
            return {"error": "name must not be empty"}
        if not _non_empty(email):
            return {"error": "email must not be empty"}
        if self.view.has(user.iri, self.pred("users")):
            return {"error": "user already registered"}
        if self._taken("name", name, user.iri):
            return {"error": f"name already taken: {name}"}
        if self._taken("email", email, user.iri):
            return {"error": f"email already taken: {email}"}
        self.view.add(user.iri, self.pred("users"), True)
        self.view.set(user.iri, self.pred("name"), name)
        self.view.set(user.iri, self.pred("email"), email)
        return {"user": user}

    def do_update(self, inputs, record_id):
        user = inputs["user"]
        if not self.view.has(user.iri, self.pred("users")):
            return {"error": "unknown user"}
        if "name" in inputs:
            name = inputs["name"]
            if not _non_empty(name):
                return {"error": "name must not be empty"}
            if self._taken("name", name, user.iri):
                return {"error": f"name already taken: {name}"}
            self.view.set(user.iri, self.pred("name"), name)
        elif "email" in inputs:
            email = inputs["email"]
            if not _non_empty(email):
                return {"error": "email must not be empty"}
            if self._taken("email", email, user.iri):
                return {"error": f"email already taken: {email}"}
            self.view.set(user.iri, self.pred("email"), email)
        else:
            return {"error": "nothing to update"}
        return {"user": user}


class PasswordConcept(ConceptHandle):
    MIN_LENGTH = 8

    @staticmethod
    def _hash(salt: str, password: str) -> str:
        return hashlib.sha256(f"{salt}:{password}".encode()).hexdigest()

    def _ok(self, password) -> bool:
        return isinstance(password, str) and len(password) >= self.MIN_LENGTH

    def do_set(self, inputs, record_id):
        user, password = inputs["user"], inputs["password"]
        if not self._ok(password):
            return {"error": f"password must be at least {self.MIN_LENGTH} characters"}
        salt = derive_token(record_id, "salt")
        self.view.set(user.iri, self.pred("salt"), salt)
        self.view.set(user.iri, self.pred("password"), self._hash(salt, password))
        return {"user": user}

    def do_check(self, inputs, record_id):
        user, password = inputs["user"], inputs["password"]
        stored = self.view.value(user.iri, self.pred("password"))
        salt = self.view.value(user.iri, self.pred("salt"))
        if stored is None or salt is None:
            return {"error": "no password set for user"}
        return {"valid": stored == self._hash(salt, str(password))}

    def do_validate(self, inputs, record_id):
        return {"valid": self._ok(inputs["password"])}


class ProfileConcept(ConceptHandle):
    def do_register(self, inputs, record_id):
        profile, user = inputs["profile"], inputs["user"]
        if self.view.has(profile.iri, self.pred("profiles")):
            return {"error": "profile already registered"}
        self.view.add(profile.iri, self.pred("profiles"), True)
        self.view.set(user.iri, self.pred("profile"), profile)
        self.view.set(profile.iri, self.pred("bio"), "")
        self.view.set(profile.iri, self.pred("image"), "")
        return {"profile": profile}

    def do_update(self, inputs, record_id):
        profile = inputs["profile"]
        if not self.view.has(profile.iri, self.pred("profiles")):
            return {"error": "unknown profile"}
        if "bio" in inputs:
            self.view.set(profile.iri, self.pred("bio"), str(inputs["bio"]))
        elif "image" in inputs:
            image = inputs["image"]
            # any non-empty address-like string; whitespace inside is never valid
            if not _non_empty(image) or any(c.isspace() for c in image):
                return {"error": f"invalid image: {image!r}"}
            self.view.set(profile.iri, self.pred("image"), image)
        else:
            return {"error": "nothing to update"}
        return {"profile": profile}


class JwtConcept(ConceptHandle):
    def do_generate(self, inputs, record_id):
        user = inputs["user"]
        token = derive_token(record_id, "token")
        self.view.set(user.iri, self.pred("token"), token)
        return {"token": token}

    def do_verify(self, inputs, record_id):
        holders = self.view.subjects(self.pred("token"), inputs["token"])
        if not holders:
            return {"error": "invalid token"}
        return {"user": Ref(holders[0])}


def slugify(title: str) -> str:
    out = []
    for c in title.lower():
        if c.isalnum():
            out.append(c)
        elif not (out and out[-1] == "-"):
            out.append("-")
    slug = "".join(out).strip("-")
    return slug or "article"


class ArticleConcept(ConceptHandle):
    _FIELDS = ("title", "description", "body")

    def __init__(self) -> None:
        super().__init__()
        self._clock = 0  # rebuilt identically on replay: dispatch order is logged

    def _tick(self) -> int:
        self._clock += 1
        return self._clock

    def do_create(self, inputs, record_id):
        article = inputs["article"]
        if not _non_empty(inputs["title"]):
            return {"error": "title must not be empty"}
        if self.view.has(article.iri, self.pred("articles")):
            return {"error": "article already exists"}
        slug = base = slugify(inputs["title"])
        n = 1
        while self.view.subjects(self.pred("slug"), slug):
            n += 1
            slug = f"{base}-{n}"
        self.view.add(article.iri, self.pred("articles"), True)
        for field in self._FIELDS:
            self.view.set(article.iri, self.pred(field), str(inputs[field]))
        self.view.set(article.iri, self.pred("slug"), slug)
        self.view.set(article.iri, self.pred("author"), inputs["author"])
        now = self._tick()
        self.view.set(article.iri, self.pred("createdAt"), now)
        self.view.set(article.iri, self.pred("updatedAt"), now)
        return {"article": article, "slug": slug}

    def do_delete(self, inputs, record_id):
        article = inputs["article"]
        if not self.view.has(article.iri, self.pred("articles")):
            return {"error": "unknown article"}
        self.view.remove(subject=article.iri)
        return {"article": article}


class CommentConcept(ConceptHandle):
    def do_add(self, inputs, record_id):
        comment = inputs["comment"]
        if not _non_empty(inputs["body"]):
            return {"error": "body must not be empty"}
        if self.view.has(comment.iri, self.pred("comments")):
            return {"error": "comment already exists"}
        self.view.add(comment.iri, self.pred("comments"), True)
        self.view.set(comment.iri, self.pred("target"), inputs["target"])
        self.view.set(comment.iri, self.pred("author"), inputs["author"])
        self.view.set(comment.iri, self.pred("body"), inputs["body"])
        return {"comment": comment}

    def do_delete(self, inputs, record_id):
        comment = inputs["comment"]
        if not self.view.has(comment.iri, self.pred("comments")):
            return {"error": "unknown comment"}
        self.view.remove(subject=comment.iri)
        return {"comment": comment}


class TagConcept(ConceptHandle):
    def do_add(self, inputs, record_id):
        target, tag = inputs["target"], inputs["tag"]
        labels = tag if isinstance(tag, list) else [] if tag is NIL else [tag]
        for label in labels:
            self.view.add(target.iri, self.pred("tag"), str(label))
        return {"target": target}


class FavoriteConcept(ConceptHandle):
    def do_add(self, inputs, record_id):
        user, target = inputs["user"], inputs["target"]
        if not self.view.has(target.iri, self.pred("favorite"), user):
            self.view.add(target.iri, self.pred("favorite"), user)
            count = len(self.view.objects(target.iri, self.pred("favorite")))
            self.view.set(target.iri, self.pred("count"), count)
        return {"target": target}


# Deliberately broken variants, kept so the principle checker has something
# real to catch. Each one violates its concept's archetypal scenario.

class BrokenPasswordCheck(PasswordConcept):
    def do_check(self, inputs, record_id):
        return {"valid": True}


class BrokenProfileRegister(ProfileConcept):
    def do_register(self, inputs, record_id):
        return {"error": "profiles are closed"}


class BrokenTokenVerify(JwtConcept):
    def do_verify(self, inputs, record_id):
        return {"error": "invalid token"}


BUILTINS: dict[str, tuple[str, type]] = {
    "Web": ("web.concept", WebConcept),
    "User": ("user.concept", UserConcept),
    "Password": ("password.concept", PasswordConcept),
    "Profile": ("profile.concept", ProfileConcept),
    "JWT": ("jwt.concept", JwtConcept),
    "Article": ("article.concept", ArticleConcept),
    "Comment": ("comment.concept", CommentConcept),
    "Tag": ("tag.concept", TagConcept),
    "Favorite": ("favorite.concept", FavoriteConcept),
}

BROKEN_VARIANTS: dict[str, type] = {
    "Password": BrokenPasswordCheck,
    "Profile": BrokenProfileRegister,
    "JWT": BrokenTokenVerify,
}


def builtin_def_path(name: str) -> Path:
    filename, _ = BUILTINS[name]
    return _DEFS / filename


def load_builtin_spec(name: str) -> ConceptSpec:
    return parse_concept(builtin_def_path(name).read_text())


def make_builtin_handle(name: str) -> ConceptHandle:
    _, cls = BUILTINS[name]
    return cls()
