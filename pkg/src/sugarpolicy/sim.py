"""Sugarscape with a polluting good and four mitigation levers.

Two resources live on a bounded lattice. Sugar is dirty: harvesting and
consuming it adds pollution to the cell where it happens, and pollution
divides an agent's Cobb-Douglas welfare. Agents move, harvest, trade with
von Neumann neighbours at the geometric-mean price, then pay their metabolism.

One :class:`Simulation` owns its own ``random.Random`` so that many runs can
proceed independently and reproducibly.
"""

from __future__ import annotations

import csv
import math
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import metrics

PEAK_CAPACITY = 4
# ring width of each resource hill is min(width, height) / HILL_RINGS
HILL_RINGS = 7.0
DIRECTIONS = ((0, 1), (1, 0), (0, -1), (-1, 0))

TRACE_COLUMNS = (
    "step",
    "n_alive",
    "mean_welfare",
    "median_welfare",
    "gini",
    "log_sugar_component",
    "log_spice_component",
    "total_pollution",
)


class ConfigError(ValueError):
    """Invalid simulation or experiment configuration."""


@dataclass(slots=True)
class GridCell:
    sugar: float
    spice: float
    sugar_capacity: float
    spice_capacity: float
    pollution: float = 0.0
    occupant: Optional["Agent"] = None
    # pollution sources, kept so the pollution ledger can be audited
    harvested_sugar: float = 0.0
    consumed_sugar: float = 0.0


@dataclass(slots=True, eq=False)
class Agent:
    id: int
    x: int
    y: int
    sugar: float
    spice: float
    sugar_metabolism: int
    spice_metabolism: int
    vision: int
    alive: bool = True

    @property
    def position(self) -> tuple[int, int]:
        return (self.x, self.y)


@dataclass(frozen=True)
class PolicyVector:
    trade_tax: float = 0.0
    consumption_tax: float = 0.0
    production_cap: float = math.inf
    reinvestment: float = 0.5

    def __post_init__(self) -> None:
        if not 0.0 <= self.trade_tax <= 1.0:
            raise ConfigError(f"trade_tax must lie in [0, 1], got {self.trade_tax}")
        if not 0.0 <= self.consumption_tax <= 1.0:
            raise ConfigError(f"consumption_tax must lie in [0, 1], got {self.consumption_tax}")
        if not self.production_cap >= 0:
            raise ConfigError(f"production_cap must be >= 0, got {self.production_cap}")
        if self.reinvestment < 0:
            raise ConfigError(f"reinvestment must be >= 0, got {self.reinvestment}")

    @classmethod
    def no_policy(cls, reinvestment: float = 0.5) -> "PolicyVector":
        return cls(0.0, 0.0, math.inf, reinvestment)

    @classmethod
    def from_array(cls, x, reinvestment: float = 0.5) -> "PolicyVector":
        """Build from the optimised coordinates (trade_tax, consumption_tax, production_cap)."""
        return cls(float(x[0]), float(x[1]), float(x[2]), reinvestment)

    def as_array(self) -> np.ndarray:
        return np.array([self.trade_tax, self.consumption_tax, self.production_cap])


@dataclass(frozen=True)
class StateVector:
    pollution_rate: float = 0.2
    endowment_min: int = 5
    metabolism_max: int = 4

    def __post_init__(self) -> None:
        if self.pollution_rate < 0:
            raise ConfigError(f"pollution_rate must be >= 0, got {self.pollution_rate}")
        if self.endowment_min < 1:
            raise ConfigError(f"endowment_min must be >= 1, got {self.endowment_min}")
        if self.metabolism_max < 1:
            raise ConfigError(f"metabolism_max must be >= 1, got {self.metabolism_max}")

    def with_value(self, name: str, value: float) -> "StateVector":
        """Copy with one coordinate replaced; integer coordinates are rounded."""
        if name == "pollution_rate":
            return replace(self, pollution_rate=float(value))
        if name in ("endowment_min", "metabolism_max"):
            return replace(self, **{name: int(round(value))})
        raise ConfigError(f"unknown state variable {name!r}")


STATE_VARIABLES = ("pollution_rate", "endowment_min", "metabolism_max")


@dataclass(frozen=True)
class SimParams:
    n_agents: int = 200
    n_steps: int = 500
    width: int = 50
    height: int = 50
    endowment_max: int = 25
    vision_max: int = 5

    def __post_init__(self) -> None:
        if self.width < 10 or self.height < 10:
            raise ConfigError(f"grid must be at least 10x10, got {self.width}x{self.height}")
        if self.n_agents < 0 or self.n_steps < 0:
            raise ConfigError("n_agents and n_steps must be non-negative")
        if self.n_agents > self.width * self.height:
            raise ConfigError(f"{self.n_agents} agents do not fit on a {self.width}x{self.height} grid")
        if self.vision_max < 1:
            raise ConfigError("vision_max must be >= 1")

    @classmethod
    def desk_scale(cls) -> "SimParams":
        return cls(n_agents=100, n_steps=200, width=25, height=25)


class Landscape:
    """Rectangular, non-wrapping lattice of :class:`GridCell`."""

    def __init__(self, width: int, height: int, cells: list[GridCell]):
        self.width = width
        self.height = height
        self.cells = cells

    def cell(self, x: int, y: int) -> GridCell:
        return self.cells[x * self.height + y]

    def in_bounds(self, x: int, y: int) -> bool:
        return 0 <= x < self.width and 0 <= y < self.height

    def array(self, name: str) -> np.ndarray:
        """Field ``name`` as a (width, height) array."""
        values = [getattr(c, name) for c in self.cells]
        return np.array(values, dtype=float).reshape(self.width, self.height)

    def regrow(self, rate: float = 1.0) -> float:
        """Grow every cell back toward capacity; returns the sugar added."""
        added = 0.0
        for c in self.cells:
            if c.sugar < c.sugar_capacity:
                new = min(c.sugar + rate, c.sugar_capacity)
                added += new - c.sugar
                c.sugar = new
            if c.spice < c.spice_capacity:
                c.spice = min(c.spice + rate, c.spice_capacity)
        return added

    def total_pollution(self) -> float:
        return math.fsum(c.pollution for c in self.cells)


def _hill_capacity(cx: float, cy: float, x: int, y: int, ring: float) -> int:
    d = math.hypot(x + 0.5 - cx, y + 0.5 - cy)
    return max(0, PEAK_CAPACITY - int(d // ring))


def init_landscape(params: SimParams, rng: Optional[random.Random] = None) -> Landscape:
    """Two sugar hills (SW and NE quadrants) and two spice hills (NW and SE).

    Each hill is a set of concentric rings around its quadrant centre with
    capacity 4 at the peak, dropping by one per ring; the ring width scales
    with the grid (about 7 cells on a 50x50 lattice). Stocks start
    full and pollution starts at zero. ``rng`` is accepted for interface
    symmetry; the layout is deterministic.
    """
    w, h = params.width, params.height
    if w < 10 or h < 10:
        raise ConfigError("grid must be at least 10x10")
    ring = min(w, h) / HILL_RINGS
    sugar_centres = [(w / 4, h / 4), (3 * w / 4, 3 * h / 4)]
    spice_centres = [(w / 4, 3 * h / 4), (3 * w / 4, h / 4)]
    cells = []
    for x in range(w):
        for y in range(h):
            sc = max(_hill_capacity(cx, cy, x, y, ring) for cx, cy in sugar_centres)
            pc = max(_hill_capacity(cx, cy, x, y, ring) for cx, cy in spice_centres)
            cells.append(GridCell(float(sc), float(pc), float(sc), float(pc)))
    return Landscape(w, h, cells)


def init_agents(params: SimParams, state: StateVector, rng: random.Random,
                landscape: Optional[Landscape] = None) -> list[Agent]:
    """Place ``n_agents`` on distinct random cells with random endowments and traits."""
    n_cells = params.width * params.height
    if params.n_agents > n_cells:
        raise ConfigError(f"{params.n_agents} agents exceed {n_cells} cells")
    if state.endowment_min > params.endowment_max:
        raise ConfigError(
            f"endowment_min {state.endowment_min} exceeds endowment_max {params.endowment_max}")
    free = [i for i in range(n_cells)
            if landscape is None or landscape.cells[i].occupant is None]
    if params.n_agents > len(free):
        raise ConfigError("not enough free cells for the agents")
    spots = rng.sample(free, params.n_agents)
    agents = []
    for i, idx in enumerate(spots):
        x, y = divmod(idx, params.height)
        agent = Agent(
            id=i,
            x=x,
            y=y,
            sugar=float(rng.randint(state.endowment_min, params.endowment_max)),
            spice=float(rng.randint(state.endowment_min, params.endowment_max)),
            sugar_metabolism=rng.randint(1, state.metabolism_max),
            spice_metabolism=rng.randint(1, state.metabolism_max),
            vision=rng.randint(1, params.vision_max),
        )
        agents.append(agent)
        if landscape is not None:
            landscape.cells[idx].occupant = agent
    return agents


def cobb_douglas(sugar: float, spice: float, m_sugar: float, m_spice: float) -> float:
    if sugar <= 0 or spice <= 0:
        return 0.0
    total = m_sugar + m_spice
    return sugar ** (m_sugar / total) * spice ** (m_spice / total)


def welfare(agent: Agent, cell_pollution: float, sugar: Optional[float] = None,
            spice: Optional[float] = None) -> float:
    """Cobb-Douglas welfare divided by (1 + pollution).

    ``sugar``/``spice`` override the agent's holdings for prospective evaluation.
    """
    s = agent.sugar if sugar is None else sugar
    p = agent.spice if spice is None else spice
    return cobb_douglas(s, p, agent.sugar_metabolism, agent.spice_metabolism) / (1.0 + cell_pollution)


def mrs(agent: Agent, sugar: Optional[float] = None, spice: Optional[float] = None) -> float:
    """Spice the agent would give for one sugar: (spice/m_spice) / (sugar/m_sugar)."""
    s = agent.sugar if sugar is None else sugar
    p = agent.spice if spice is None else spice
    if s <= 0:
        return math.inf
    return (p / agent.spice_metabolism) / (s / agent.sugar_metabolism)


def harvestable(cell: GridCell, policy: PolicyVector) -> tuple[float, float]:
    """Sugar and spice an agent would collect from ``cell`` under the cap."""
    sugar = cell.sugar if cell.pollution <= policy.production_cap else 0.0
    return sugar, cell.spice


def step_move(agent: Agent, landscape: Landscape, policy: PolicyVector,
              rng: random.Random) -> tuple[int, int]:
    """Move to the nearest best-welfare cell along the four cardinal lines of sight."""
    here = landscape.cell(agent.x, agent.y)
    hs, hp = harvestable(here, policy)
    best = welfare(agent, here.pollution, agent.sugar + hs, agent.spice + hp)
    choices = [(agent.x, agent.y)]
    best_dist = 0
    cap = policy.production_cap
    height = landscape.height
    cells = landscape.cells
    for dx, dy in DIRECTIONS:
        x, y = agent.x, agent.y
        for dist in range(1, agent.vision + 1):
            x += dx
            y += dy
            if not (0 <= x < landscape.width and 0 <= y < height):
                break
            c = cells[x * height + y]
            if c.occupant is not None:
                continue
            gain_sugar = c.sugar if c.pollution <= cap else 0.0
            w = welfare(agent, c.pollution, agent.sugar + gain_sugar, agent.spice + c.spice)
            if w > best or (w == best and dist < best_dist):
                best, best_dist, choices = w, dist, [(x, y)]
            elif w == best and dist == best_dist:
                choices.append((x, y))
    target = choices[0] if len(choices) == 1 else rng.choice(choices)
    if target != (agent.x, agent.y):
        here.occupant = None
        agent.x, agent.y = target
        landscape.cell(*target).occupant = agent
    return target


def harvest(agent: Agent, cell: GridCell, policy: PolicyVector,
            state: StateVector) -> tuple[float, float]:
    """Collect the cell's resources; returns (sugar, spice) received.

    Spice is always taken. Sugar is taken, and polluted at rate beta, only while
    the cell is at or below the production cap; otherwise it stays put and the
    agent receives the reinvestment subsidy in spice.
    """
    spice = cell.spice
    cell.spice = 0.0
    if cell.pollution <= policy.production_cap:
        sugar = cell.sugar
        cell.sugar = 0.0
        cell.pollution += state.pollution_rate * sugar
        cell.harvested_sugar += sugar
    else:
        sugar = 0.0
        spice += policy.reinvestment
    agent.sugar += sugar
    agent.spice += spice
    return sugar, spice


def consume(agent: Agent, cell: GridCell, policy: PolicyVector, state: StateVector) -> Agent:
    """Pay metabolism, with the consumption tax refunded as spice; then check for death."""
    rho = agent.sugar_metabolism
    agent.sugar -= rho * (1.0 + policy.consumption_tax)
    agent.spice -= agent.spice_metabolism
    agent.spice += rho * policy.consumption_tax
    cell.pollution += state.pollution_rate * rho
    cell.consumed_sugar += rho
    if agent.sugar <= 0 or agent.spice <= 0:
        agent.alive = False
    return agent


@dataclass(frozen=True)
class Trade:
    buyer: int
    seller: int
    price: float
    sugar: float
    spice: float
    tax: float


def trade(a: Agent, b: Agent, policy: PolicyVector, rng: Optional[random.Random] = None,
          pollution_a: float = 0.0, pollution_b: float = 0.0) -> list[Trade]:
    """Bilateral bargaining at the geometric-mean price until gains are exhausted.

    The agent with the higher MRS buys sugar. Per exchange: one sugar for
    ``price`` spice when price >= 1, else ``1/price`` sugar for one spice. The
    buyer also pays ``trade_tax`` times the spice handed over, which leaves the
    economy. An exchange goes through only if both welfares strictly rise and
    the buyer's MRS stays at or above the seller's.
    """
    trades: list[Trade] = []
    while True:
        ma, mb = mrs(a), mrs(b)
        if ma == mb or not (math.isfinite(ma) and math.isfinite(mb)) or ma <= 0 or mb <= 0:
            break
        if ma > mb:
            buyer, seller, pb, ps = a, b, pollution_a, pollution_b
        else:
            buyer, seller, pb, ps = b, a, pollution_b, pollution_a
        price = math.sqrt(ma * mb)
        if price >= 1.0:
            sugar_qty, spice_qty = 1.0, price
        else:
            sugar_qty, spice_qty = 1.0 / price, 1.0
        tax = policy.trade_tax * spice_qty
        b_sugar, b_spice = buyer.sugar + sugar_qty, buyer.spice - spice_qty - tax
        s_sugar, s_spice = seller.sugar - sugar_qty, seller.spice + spice_qty
        if (welfare(buyer, pb, b_sugar, b_spice) <= welfare(buyer, pb)
                or welfare(seller, ps, s_sugar, s_spice) <= welfare(seller, ps)):
            break
        if mrs(buyer, b_sugar, b_spice) < mrs(seller, s_sugar, s_spice):
            break
        buyer.sugar, buyer.spice = b_sugar, b_spice
        seller.sugar, seller.spice = s_sugar, s_spice
        trades.append(Trade(buyer.id, seller.id, price, sugar_qty, spice_qty, tax))
    return trades


@dataclass
class SimResult:
    """Per-step series (index 0 is the initial state) plus the end-state population."""

    n_agents: int
    steps: np.ndarray
    n_alive: np.ndarray
    mean_welfare: np.ndarray
    median_welfare: np.ndarray
    gini: np.ndarray
    log_sugar_component: np.ndarray
    log_spice_component: np.ndarray
    total_pollution: np.ndarray
    final_agents: list[Agent] = field(default_factory=list)
    final_welfares: np.ndarray = field(default_factory=lambda: np.zeros(0))
    n_trades: int = 0

    @property
    def survival_rate(self) -> float:
        return metrics.survival_rate(self)

    def trace_rows(self) -> list[tuple]:
        return list(zip(
            self.steps.tolist(), self.n_alive.tolist(), self.mean_welfare.tolist(),
            self.median_welfare.tolist(), self.gini.tolist(),
            self.log_sugar_component.tolist(), self.log_spice_component.tolist(),
            self.total_pollution.tolist(),
        ))

    def write_trace(self, path: "str | Path") -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(TRACE_COLUMNS)
            writer.writerows(self.trace_rows())

    def same_as(self, other: "SimResult") -> bool:
        """Bitwise equality of every series (NaN compares equal to NaN)."""
        series = ("steps", "n_alive", "mean_welfare", "median_welfare", "gini",
                  "log_sugar_component", "log_spice_component", "total_pollution",
                  "final_welfares")
        for name in series:
            a, b = getattr(self, name), getattr(other, name)
            if a.shape != b.shape or not np.array_equal(a, b, equal_nan=True):
                return False
        return self.n_trades == other.n_trades


class Simulation:
    """A single seeded model run that can be advanced step by step."""

    def __init__(self, policy: PolicyVector, state: StateVector, params: SimParams, seed: int):
        self.policy = policy
        self.state = state
        self.params = params
        self.rng = random.Random(seed)
        self.landscape = init_landscape(params, self.rng)
        self.agents = init_agents(params, state, self.rng, self.landscape)
        self.t = 0
        self.n_trades = 0
        # cumulative sugar flows for conservation checks
        self.regrown_sugar = 0.0
        self.consumed_sugar = 0.0
        self.vanished_sugar = 0.0
        self.rebated_spice = 0.0
        self.reinvested_spice = 0.0
        self.taxed_spice = 0.0

    @property
    def alive(self) -> list[Agent]:
        return [a for a in self.agents if a.alive]

    def welfares(self) -> list[float]:
        cells = self.landscape.cells
        h = self.landscape.height
        return [welfare(a, cells[a.x * h + a.y].pollution) for a in self.agents if a.alive]

    def _neighbours(self, agent: Agent) -> list[Agent]:
        out = []
        ls = self.landscape
        for dx, dy in DIRECTIONS:
            x, y = agent.x + dx, agent.y + dy
            if 0 <= x < ls.width and 0 <= y < ls.height:
                other = ls.cells[x * ls.height + y].occupant
                if other is not None:
                    out.append(other)
        return out

    def _act(self, agent: Agent) -> None:
        ls = self.landscape
        policy, state, rng = self.policy, self.state, self.rng
        step_move(agent, ls, policy, rng)
        cell = ls.cell(agent.x, agent.y)
        blocked = cell.pollution > policy.production_cap
        harvest(agent, cell, policy, state)
        if blocked:
            self.reinvested_spice += policy.reinvestment
        partners = self._neighbours(agent)
        rng.shuffle(partners)
        for other in partners:
            if not agent.alive or not other.alive:
                continue
            done = trade(agent, other, policy, rng, cell.pollution,
                         ls.cell(other.x, other.y).pollution)
            self.n_trades += len(done)
            self.taxed_spice += sum(t.tax for t in done)
        consume(agent, cell, policy, state)
        self.consumed_sugar += agent.sugar_metabolism * (1.0 + policy.consumption_tax)
        self.rebated_spice += agent.sugar_metabolism * policy.consumption_tax
        if not agent.alive:
            self.vanished_sugar += agent.sugar
            cell.occupant = None

    def step(self) -> None:
        order = [a for a in self.agents if a.alive]
        self.rng.shuffle(order)
        for agent in order:
            if agent.alive:
                self._act(agent)
        self.regrown_sugar += self.landscape.regrow(1.0)
        self.t += 1

    def snapshot(self) -> tuple:
        alive = self.alive
        w = self.welfares()
        sugar_part, spice_part = metrics.mean_decomposition(alive)
        return (self.t, len(alive), metrics.mean_welfare(w), metrics.median_welfare(w),
                metrics.gini(w), sugar_part, spice_part, self.landscape.total_pollution())

    def run(self) -> SimResult:
        rows = [self.snapshot()]
        for _ in range(self.params.n_steps):
            self.step()
            rows.append(self.snapshot())
        cols = list(zip(*rows))
        alive = self.alive
        return SimResult(
            n_agents=len(self.agents),
            steps=np.array(cols[0], dtype=int),
            n_alive=np.array(cols[1], dtype=int),
            mean_welfare=np.array(cols[2], dtype=float),
            median_welfare=np.array(cols[3], dtype=float),
            gini=np.array(cols[4], dtype=float),
            log_sugar_component=np.array(cols[5], dtype=float),
            log_spice_component=np.array(cols[6], dtype=float),
            total_pollution=np.array(cols[7], dtype=float),
            final_agents=[replace(a) for a in alive],
            final_welfares=np.array(self.welfares(), dtype=float),
            n_trades=self.n_trades,
        )


def run_simulation(policy: PolicyVector, state: StateVector, params: SimParams,
                   seed: int) -> SimResult:
    """Run one model realisation; identical inputs give a bit-identical result."""
    return Simulation(policy, state, params, seed).run()
