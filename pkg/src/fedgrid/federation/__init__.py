"""Federation server, clients, aggregation rules and the wire codec."""

from .codec import (
    BadMagicError,
    ChecksumError,
    CodecError,
    MessageKind,
    RoundMessage,
    TruncatedFrameError,
    decode,
    encode,
)
from .fedavg import fedavg_aggregate
from .hypernet import (
    HypernetState,
    hnet_forward,
    hnet_vjp,
    load_state,
    make_hypernet,
    pfh_update,
    save_state,
    transfer_init,
)
from .rounds import Algorithm, Client, FedConfig, RoundAbortedError, ServerState, run_round

__all__ = [
    "Algorithm", "BadMagicError", "ChecksumError", "Client", "CodecError", "FedConfig",
    "HypernetState", "MessageKind", "RoundAbortedError", "RoundMessage", "ServerState",
    "TruncatedFrameError", "decode", "encode", "fedavg_aggregate", "hnet_forward", "hnet_vjp",
    "load_state", "make_hypernet", "pfh_update", "run_round", "save_state", "transfer_init",
]
