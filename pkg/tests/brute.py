"""Naive reference checker, written independently of llm_mapf.validator."""


def brute_force_violations(width, height, obstacles, current, proposed):
    """Set of (kind, agents, cells) tuples with 1-based agent ids."""
    out = set()
    n = len(proposed)
    blocked = []
    for i in range(n):
        (cx, cy), (px, py) = current[i], proposed[i]
        inside = 0 <= px < width and 0 <= py < height
        if not inside:
            out.add(("out_of_bounds", (i + 1,), ((px, py),)))
        if abs(cx - px) + abs(cy - py) > 1:
            out.add(("illegal_move", (i + 1,), ((cx, cy), (px, py))))
        if inside and (px, py) in obstacles:
            blocked.append(i)
    if blocked:
        out.add(
            (
                "obstacle_collision",
                tuple(i + 1 for i in blocked),
                tuple(tuple(proposed[i]) for i in blocked),
            )
        )
    groups = {}
    for i in range(n):
        for j in range(n):
            if i < j and tuple(proposed[i]) == tuple(proposed[j]):
                groups.setdefault(tuple(proposed[i]), set()).update({i + 1, j + 1})
    for cell, ids in groups.items():
        out.add(("vertex_conflict", tuple(sorted(ids)), (cell,)))
    return out
