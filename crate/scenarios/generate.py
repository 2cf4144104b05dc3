"""Writes the checked-in scenario files. Run from this directory."""

import json

ANCHOR = 1_700_000_000_000


def frames(start, end, step, labels, summary):
    out = []
    t = start
    while t < end - 1e-9:
        out.append({"type": "frame", "t_rel_s": round(t, 3), "labels": labels, "summary": summary})
        t += step
    return out


def query(t, text):
    return {"type": "query", "t_rel_s": t, "text": text}


def write(name, records):
    records = sorted(records, key=lambda r: (r["t_rel_s"], r["type"] == "query"))
    with open(f"{name}.jsonl", "w") as f:
        f.write(json.dumps({"type": "anchor", "device_rel_s": 0.0, "abs_ms": ANCHOR}) + "\n")
        for r in records:
            f.write(json.dumps(r, separators=(",", ":")) + "\n")


write(
    "driver_fatigue",
    frames(0, 10, 0.5, ["driving"], "driver watching the road")
    + frames(10, 14, 0.5, ["yawning"], "driver yawns")
    + frames(14, 20, 0.5, ["driving"], "driver watching the road")
    + frames(20, 24, 0.5, ["phone_use"], "driver looks at a phone")
    + frames(24, 28, 0.5, ["driving"], "driver watching the road")
    + frames(28, 32, 0.5, ["eyes_closed", "yawning"], "driver eyes closed")
    + frames(32, 40, 0.5, ["driving"], "driver watching the road")
    + [query(16.0, "What is the driver doing right now?"), query(38.0, "What was the driver doing earlier?")],
)

write(
    "household_fall",
    frames(0, 10, 0.5, ["person_walking"], "elderly person walking in the living room")
    + frames(10, 12, 0.5, ["person_fallen"], "person lying on the floor")
    + frames(12, 16, 0.5, ["person_lying"], "person lying still on the floor")
    + frames(16, 18, 0.5, ["unresponsive"], "person not moving")
    + frames(18, 30, 0.5, ["person_lying"], "person lying still on the floor")
    + [query(22.0, "Please call for help, this is an emergency")],
)

write(
    "tutor_proactive",
    frames(0, 40, 1.0, ["worksheet"], "student working on a math worksheet")
    + [
        query(2.0, "Solve this equation: 2x + 3 = 7"),
        query(6.0, "Follow up with me in 20 seconds to check my homework"),
    ],
)

write(
    "trip_reminder",
    frames(0, 100, 2.0, ["city_street"], "bus driving through city streets")
    + frames(100, 140, 2.0, ["station_sign"], "bus approaching central station")
    + frames(140, 360, 2.0, ["suburb"], "bus driving through the suburbs")
    + [
        query(5.0, "Remind me to get off in 5 minute"),
        query(90.0, "Remind me of the station name in 30 seconds"),
    ],
)

write(
    "mixed_queries",
    frames(0, 120, 2.0, ["traffic_jam"], "heavy traffic congestion")
    + frames(120, 400, 2.0, ["open_road"], "light traffic on an open road")
    + [
        query(60.0, "What is on the road right now?"),
        query(301.0, "What has changed in traffic conditions compared to five minutes ago?"),
        query(320.0, "Remind me in 1 minute to check the mirrors"),
        query(330.0, "What happens from 2 to 6 seconds?"),
    ],
)
