"""Weighted finite-state transducers over the tropical semiring.

Weights are costs (negated natural-log probabilities).  Label id 0 is
epsilon and id 1 is the failure label ``#phi`` used for n-gram backoff;
every :class:`SymbolTable` reserves both.
"""

import heapq
import math
from collections import namedtuple

from .errors import ConfigError, InputError

EPSILON = 0
PHI = 1
EPS_SYMBOL = "<eps>"
PHI_SYMBOL = "#phi"

INF = math.inf


class Tropical:
    """(min, +) semiring on costs."""

    zero = INF
    one = 0.0

    @staticmethod
    def plus(a, b):
        return a if a <= b else b

    @staticmethod
    def times(a, b):
        return a + b


Arc = namedtuple("Arc", "ilabel olabel weight nextstate")


class SymbolTable:
    """Bidirectional label map with ``<eps>`` = 0 and ``#phi`` = 1."""

    def __init__(self, symbols=()):
        self._symbols = [EPS_SYMBOL, PHI_SYMBOL]
        self._index = {EPS_SYMBOL: EPSILON, PHI_SYMBOL: PHI}
        for s in symbols:
            self.add(s)

    def add(self, symbol):
        if symbol in self._index:
            if symbol in (EPS_SYMBOL, PHI_SYMBOL):
                raise ConfigError(f"{symbol!r} is reserved")
            return self._index[symbol]
        self._index[symbol] = len(self._symbols)
        self._symbols.append(symbol)
        return self._index[symbol]

    def find(self, key):
        """Map a symbol to its id or an id to its symbol."""
        if isinstance(key, str):
            return self._index[key]
        return self._symbols[key]

    def __contains__(self, symbol):
        return symbol in self._index

    def __len__(self):
        return len(self._symbols)

    def __eq__(self, other):
        return isinstance(other, SymbolTable) and self._symbols == other._symbols

    def __hash__(self):
        return hash(tuple(self._symbols))

    @property
    def symbols(self):
        return list(self._symbols)

    @property
    def regular(self):
        """Non-reserved symbols, in id order."""
        return self._symbols[2:]

    def write(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for i, s in enumerate(self._symbols):
                f.write(f"{s}\t{i}\n")

    @classmethod
    def read(cls, path):
        entries = []
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                try:
                    sym, idx = line.split("\t")
                    entries.append((int(idx), sym))
                except ValueError:
                    raise InputError(f"{path}:{lineno}: expected 'symbol<TAB>id'") from None
        entries.sort()
        if [i for i, _ in entries] != list(range(len(entries))):
            raise InputError(f"{path}: symbol ids must be contiguous from 0")
        if entries[:2] != [(0, EPS_SYMBOL), (1, PHI_SYMBOL)]:
            raise InputError(f"{path}: ids 0 and 1 must be {EPS_SYMBOL} and {PHI_SYMBOL}")
        return cls(s for _, s in entries[2:])


class Wfst:
    """Mutable while being built; treat as immutable once handed to a decoder."""

    def __init__(self, isyms, osyms=None):
        self.isyms = isyms
        self.osyms = osyms if osyms is not None else isyms
        self.start = None
        self._arcs = []
        self._finals = {}

    def add_state(self):
        self._arcs.append([])
        return len(self._arcs) - 1

    def add_states(self, n):
        for _ in range(n):
            self.add_state()

    def set_start(self, state):
        self._check_state(state)
        self.start = state

    def set_final(self, state, weight=0.0):
        self._check_state(state)
        if weight == INF:
            self._finals.pop(state, None)
        else:
            self._finals[state] = float(weight)

    def add_arc(self, state, ilabel, olabel, weight, nextstate):
        self._check_state(state)
        self._check_state(nextstate)
        if ilabel == PHI or olabel == PHI:
            if ilabel != olabel:
                raise ConfigError("phi arcs must carry phi on both sides")
            if self.phi_arc(state) is not None:
                raise ConfigError(f"state {state} already has a phi arc")
        arc = Arc(ilabel, olabel, float(weight), nextstate)
        self._arcs[state].append(arc)
        return arc

    def _check_state(self, state):
        if not 0 <= state < len(self._arcs):
            raise ConfigError(f"invalid state id {state}")

    @property
    def num_states(self):
        return len(self._arcs)

    def states(self):
        return range(len(self._arcs))

    def arcs(self, state):
        return self._arcs[state]

    def final(self, state):
        return self._finals.get(state, INF)

    def is_final(self, state):
        return state in self._finals

    @property
    def finals(self):
        return dict(self._finals)

    def phi_arc(self, state):
        for arc in self._arcs[state]:
            if arc.ilabel == PHI:
                return arc
        return None

    @property
    def num_arcs(self):
        return sum(len(a) for a in self._arcs)

    def has_phi(self):
        return any(a.ilabel == PHI for arcs in self._arcs for a in arcs)

    def __repr__(self):
        return f"Wfst({self.num_states} states, {self.num_arcs} arcs)"


class Path:
    """A successful path: ``arcs`` is a list of ``(source_state, Arc)``."""

    def __init__(self, arcs, final_weight, fst):
        self.arcs = arcs
        self.final_weight = final_weight
        self.weight = 0.0
        for _, arc in arcs:
            self.weight += arc.weight
        self.weight += final_weight
        self.ilabels = tuple(a.ilabel for _, a in arcs if a.ilabel not in (EPSILON, PHI))
        self.olabels = tuple(a.olabel for _, a in arcs if a.olabel not in (EPSILON, PHI))
        self._fst = fst

    @property
    def istring(self):
        return tuple(self._fst.isyms.find(i) for i in self.ilabels)

    @property
    def ostring(self):
        return tuple(self._fst.osyms.find(o) for o in self.olabels)

    def __repr__(self):
        return f"Path({' '.join(self.ostring)!r}, weight={self.weight:.6g})"


def _arc_index(fst):
    index = []
    for s in fst.states():
        by_label = {}
        for arc in fst.arcs(s):
            by_label.setdefault(arc.ilabel, []).append(arc)
        index.append(by_label)
    return index


def compose(a, b):
    """Compose ``a`` with ``b``; ``b`` may carry phi (failure) arcs.

    A phi arc of ``b`` is followed only when the label being matched has no
    explicit arc at the current ``b`` state, recursively along the phi chain.
    Final weights of ``b`` are resolved through the same chain.  The result is
    trimmed.
    """
    if a.osyms != b.isyms:
        raise ConfigError("compose: output symbols of the left machine differ from "
                          "input symbols of the right machine")
    if a.has_phi():
        raise ConfigError("compose: the left machine must not carry phi arcs")
    out = Wfst(a.isyms, b.osyms)
    if a.start is None or b.start is None:
        return out
    b_index = _arc_index(b)

    def b_matches(qb, label):
        cost = 0.0
        while True:
            arcs = b_index[qb].get(label)
            if arcs:
                return cost, arcs
            phi = b_index[qb].get(PHI)
            if not phi:
                return cost, ()
            cost += phi[0].weight
            qb = phi[0].nextstate

    def b_final(qb):
        cost = 0.0
        while not b.is_final(qb):
            phi = b_index[qb].get(PHI)
            if not phi:
                return INF
            cost += phi[0].weight
            qb = phi[0].nextstate
        return cost + b.final(qb)

    ids = {}
    queue = []

    def state_of(pair):
        if pair not in ids:
            ids[pair] = out.add_state()
            queue.append(pair)
        return ids[pair]

    out.set_start(state_of((a.start, b.start)))
    head = 0
    while head < len(queue):
        qa, qb = queue[head]
        src = ids[(qa, qb)]
        head += 1
        fw = a.final(qa) + b_final(qb) if a.is_final(qa) else INF
        if fw < INF:
            out.set_final(src, fw)
        for arc in a.arcs(qa):
            if arc.olabel == EPSILON:
                out.add_arc(src, arc.ilabel, EPSILON, arc.weight, state_of((arc.nextstate, qb)))
                continue
            phi_cost, matches = b_matches(qb, arc.olabel)
            for barc in matches:
                out.add_arc(src, arc.ilabel, barc.olabel, arc.weight + phi_cost + barc.weight,
                            state_of((arc.nextstate, barc.nextstate)))
        for barc in b_index[qb].get(EPSILON, ()):
            out.add_arc(src, EPSILON, barc.olabel, barc.weight, state_of((qa, barc.nextstate)))
    return trim(out)


def _reachable(n, edges, seeds):
    seen = set(seeds)
    stack = list(seeds)
    while stack:
        s = stack.pop()
        for t in edges[s]:
            if t not in seen:
                seen.add(t)
                stack.append(t)
    return seen


def trim(f):
    """Keep only states on some start-to-final path, renumbered in order."""
    out = Wfst(f.isyms, f.osyms)
    if f.start is None:
        return out
    fwd = [[a.nextstate for a in f.arcs(s)] for s in f.states()]
    bwd = [[] for _ in f.states()]
    for s in f.states():
        for a in f.arcs(s):
            bwd[a.nextstate].append(s)
    keep = _reachable(f.num_states, fwd, [f.start]) & _reachable(f.num_states, bwd, list(f.finals))
    if f.start not in keep:
        return out
    mapping = {}
    for s in sorted(keep):
        mapping[s] = out.add_state()
    out.set_start(mapping[f.start])
    for s in sorted(keep):
        for a in f.arcs(s):
            if a.nextstate in keep:
                out.add_arc(mapping[s], a.ilabel, a.olabel, a.weight, mapping[a.nextstate])
        if f.is_final(s):
            out.set_final(mapping[s], f.final(s))
    return out


def distance_to_final(f):
    """Shortest cost from each state to acceptance (Bellman-Ford, reversed)."""
    dist = [f.final(s) for s in f.states()]
    for _ in range(f.num_states + 1):
        changed = False
        for s in f.states():
            for a in f.arcs(s):
                d = a.weight + dist[a.nextstate]
                if d < dist[s]:
                    dist[s] = d
                    changed = True
        if not changed:
            return dist
    raise ConfigError("machine has a negative-cost cycle")


def shortest_path(f, n=1):
    """Up to ``n`` paths with distinct output strings, cheapest first.

    A* over (state, output string) with the exact distance-to-final as the
    heuristic, so the first completion of each output string is its best
    path.  Phi arcs, if present, are treated as ordinary epsilon arcs.
    """
    if f.start is None or n <= 0:
        return []
    h = distance_to_final(f)
    if h[f.start] == INF:
        return []
    counter = 0
    # entries: (f-cost, tiebreak, g, state, ostring, node); state None marks completion
    heap = [(h[f.start], 0, 0.0, f.start, (), None)]
    expanded = set()
    done = set()
    results = []
    while heap and len(results) < n:
        _, _, g, state, ostr, node = heapq.heappop(heap)
        if state is None:
            if ostr in done:
                continue
            done.add(ostr)
            src, fw = node
            arcs = []
            while src is not None:
                src, step = src
                arcs.append(step)
            arcs.reverse()
            results.append(Path(arcs, fw, f))
            continue
        if (state, ostr) in expanded:
            continue
        expanded.add((state, ostr))
        if f.is_final(state) and ostr not in done:
            counter += 1
            fw = f.final(state)
            heapq.heappush(heap, (g + fw, counter, g + fw, None, ostr, (node, fw)))
        for arc in f.arcs(state):
            if h[arc.nextstate] == INF:
                continue
            o2 = ostr if arc.olabel in (EPSILON, PHI) else ostr + (arc.olabel,)
            if (arc.nextstate, o2) in expanded:
                continue
            g2 = g + arc.weight
            counter += 1
            heapq.heappush(heap, (g2 + h[arc.nextstate], counter, g2, arc.nextstate, o2,
                                  (node, (state, arc))))
    return results


def accept_cost(f, labels):
    """Cost of reading ``labels`` through a deterministic acceptor with phi arcs.

    At each state the explicit arc for the label is taken if present; otherwise
    the phi arc is followed and the lookup retried.  Returns ``inf`` if the
    string is rejected.
    """
    if f.start is None:
        return INF
    index = _arc_index(f)
    q = f.start
    cost = 0.0
    for label in labels:
        while True:
            arcs = index[q].get(label)
            if arcs:
                cost += arcs[0].weight
                q = arcs[0].nextstate
                break
            phi = index[q].get(PHI)
            if not phi:
                return INF
            cost += phi[0].weight
            q = phi[0].nextstate
    while not f.is_final(q):
        phi = index[q].get(PHI)
        if not phi:
            return INF
        cost += phi[0].weight
        q = phi[0].nextstate
    return cost + f.final(q)


def best_cost(f, labels, side="output"):
    """Viterbi cost of the best path whose ``side`` label string equals ``labels``.

    Arcs labelled epsilon on that side are free moves.  No failure semantics;
    intended for phi-free machines.
    """
    if f.start is None:
        return INF
    attr = 1 if side == "output" else 0

    def closure(dist):
        best = dict(dist)
        # label-free moves; relaxation loop tolerates negative arcs without cycles
        for _ in range(f.num_states + 1):
            changed = False
            for s, d in list(best.items()):
                for a in f.arcs(s):
                    if a[attr] in (EPSILON, PHI):
                        nd = d + a.weight
                        if nd < best.get(a.nextstate, INF):
                            best[a.nextstate] = nd
                            changed = True
            if not changed:
                break
        return best

    dist = closure({f.start: 0.0})
    for label in labels:
        nxt = {}
        for s, d in dist.items():
            for a in f.arcs(s):
                if a[attr] == label:
                    nd = d + a.weight
                    if nd < nxt.get(a.nextstate, INF):
                        nxt[a.nextstate] = nd
        if not nxt:
            return INF
        dist = closure(nxt)
    return min((d + f.final(s) for s, d in dist.items()), default=INF)


def write_text(f, path, isyms_path=None, osyms_path=None):
    """Write ``src dst ilabel olabel cost`` lines, then ``state cost`` final lines.

    The start state is the source of the first line, as in the usual text
    convention; costs use 17 significant digits so reading back is exact.
    """
    lines = []
    if f.start is not None:
        order = [f.start] + [s for s in f.states() if s != f.start]
        if not f.arcs(f.start):
            lines.append(f"{f.start} {f.final(f.start):.17g}")
        for s in order:
            for a in f.arcs(s):
                lines.append(f"{s} {a.nextstate} {f.isyms.find(a.ilabel)} "
                             f"{f.osyms.find(a.olabel)} {a.weight:.17g}")
        for s in order:
            if f.is_final(s) and not (s == f.start and not f.arcs(f.start)):
                lines.append(f"{s} {f.final(s):.17g}")
    with open(path, "w", encoding="utf-8") as out:
        out.write("\n".join(lines) + ("\n" if lines else ""))
    if isyms_path:
        f.isyms.write(isyms_path)
    if osyms_path:
        f.osyms.write(osyms_path)


def read_text(path, isyms, osyms=None):
    osyms = osyms if osyms is not None else isyms
    f = Wfst(isyms, osyms)
    with open(path, encoding="utf-8") as src:
        rows = [(n, line.split()) for n, line in enumerate(src, 1) if line.strip()]
    nstates = 0
    for lineno, parts in rows:
        if len(parts) not in (2, 5):
            raise InputError(f"{path}:{lineno}: expected 2 or 5 fields, got {len(parts)}")
        try:
            nstates = max([nstates, int(parts[0]) + 1] + ([int(parts[1]) + 1] if len(parts) == 5 else []))
        except ValueError:
            raise InputError(f"{path}:{lineno}: bad state id") from None
    f.add_states(nstates)
    for lineno, parts in rows:
        try:
            if len(parts) == 5:
                src, dst, il, ol, w = parts
                f.add_arc(int(src), isyms.find(il), osyms.find(ol), float(w), int(dst))
            else:
                f.set_final(int(parts[0]), float(parts[1]))
        except KeyError as e:
            raise InputError(f"{path}:{lineno}: unknown symbol {e}") from None
    if rows:
        f.set_start(int(rows[0][1][0]))
    return f
