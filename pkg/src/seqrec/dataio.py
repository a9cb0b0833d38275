"""JSON Lines persistence for the synthetic world (events and posts files)."""
from __future__ import annotations

import json

import numpy as np

from .actions import action_from_name
from .world import InteractionEvent, Post


def write_events_jsonl(path, events: list) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in events:
            fh.write(json.dumps({
                "user_id": e.user_id,
                "post_id": e.post_id,
                "action": e.action.name.lower(),
                "surface": e.surface,
                "ts": e.ts,
            }, sort_keys=True) + "\n")


def read_events_jsonl(path) -> list:
    events = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            events.append(InteractionEvent(
                user_id=int(d["user_id"]),
                post_id=int(d["post_id"]),
                action=action_from_name(d["action"]),
                surface=d["surface"],
                ts=int(d["ts"]),
            ))
    return events


def write_posts_jsonl(path, posts: list) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in posts:
            fh.write(json.dumps({
                "post_id": p.post_id,
                "created_at": p.created_at,
                "lifetime_days": p.lifetime_days,
                "lang": p.lang,
                "country": p.country,
                "integrity": p.integrity_violating,
                "topic": [float(x) for x in p.topic],
                "text_channel": [float(x) for x in p.text_channel],
                "image_channels": [[float(x) for x in img] for img in p.image_channels],
            }, sort_keys=True) + "\n")


def read_posts_jsonl(path) -> list:
    posts = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            posts.append(Post(
                post_id=int(d["post_id"]),
                created_at=int(d["created_at"]),
                topic=np.array(d["topic"], dtype=np.float64),
                text_channel=np.array(d["text_channel"], dtype=np.float64),
                image_channels=[np.array(img, dtype=np.float64)
                                for img in d["image_channels"]],
                lang=d["lang"],
                country=d["country"],
                lifetime_days=int(d["lifetime_days"]),
                integrity_violating=bool(d["integrity"]),
            ))
    return posts
