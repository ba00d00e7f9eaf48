from .clock import (
    Clock,
    ClockMode,
    Event,
    Interrupt,
    Process,
    RealClock,
    SimClock,
    Timeout,
    Wait,
    run_until_done,
)
from .cluster import (
    Cluster,
    DeliveryFailure,
    Endpoint,
    EventLog,
    Message,
    Store,
    StoreEstablishmentReport,
    StoreKeyError,
    StoreTimeout,
    establish_store,
    store_rounds,
)
from .collectives import (
    CollectiveTimeout,
    CommGroup,
    GroupFormationError,
    RestoreError,
    all_reduce_sum,
    barrier,
    copy_state,
    form_group,
    max_neighbors,
    ring_links,
    serve_state,
)

__all__ = [
    "Clock", "ClockMode", "Event", "Interrupt", "Process", "RealClock", "SimClock", "Timeout", "Wait",
    "run_until_done", "Cluster", "DeliveryFailure", "Endpoint", "EventLog", "Message", "Store",
    "StoreEstablishmentReport", "StoreKeyError", "StoreTimeout", "establish_store", "store_rounds",
    "CollectiveTimeout", "CommGroup", "GroupFormationError", "RestoreError", "all_reduce_sum", "barrier",
    "copy_state", "form_group", "max_neighbors", "ring_links", "serve_state",
]
