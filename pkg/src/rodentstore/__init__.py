"""Adaptive declarative storage engine: a storage algebra compiled to paged layouts."""
from .access import (
    END_OF_TABLE, AccessError, CostModel, Predicate, get_element, get_element_cost, next_element,
    order_list, scan, scan_cost, scan_estimate,
)
from .advisor import Candidate, Query, TableStats, Workload, enumerate_candidates, estimate_workload_cost, recommend
from .algebra import Nest, LogicalTable, parse_schema
from .engine import evaluate
from .parser import ParseError, format_expr, parse
from .physical import flatten, unflatten
from .storage import Database, LayoutError, StorageError

__version__ = "0.1.0"
