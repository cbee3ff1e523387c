import json
import os

from client_app import client_app
from server_app import server_app

NUM_CLIENTS = 3
EVENTS = os.environ.get("FEDFORGE_EVENTS", "events.jsonl")
ROUND_LIMIT = int(os.environ.get("FEDFORGE_ROUND_LIMIT", "5"))
SEED = int(os.environ.get("FEDFORGE_SEED", "42"))


def metric(v):
    return None if v is None else round(v, 6)


def emit(server_round, phase, loss, accuracy, num_results):
    if server_round > ROUND_LIMIT:
        return
    record = {
        "round": server_round,
        "phase": phase,
        "loss": metric(loss),
        "accuracy": metric(accuracy),
        "num_results": num_results,
    }
    with open(EVENTS, "a") as f:
        f.write(json.dumps(record) + "\n")
        f.flush()


def main():
    context = {"seed": SEED, "num_rounds": ROUND_LIMIT}
    strategy, num_rounds = server_app(context)
    clients = {
        cid: client_app({"partition_id": cid, "num_partitions": NUM_CLIENTS, "seed": SEED})
        for cid in range(NUM_CLIENTS)
    }
    parameters = strategy.initialize_parameters(list(clients))
    for rnd in range(1, num_rounds + 1):
        fit_ins = strategy.configure_fit(rnd, parameters, list(clients))
        fit_res = [clients[cid].fit(parameters, cfg) for cid, cfg in fit_ins]
        new_params, fit_metrics = strategy.aggregate_fit(rnd, fit_res, [])
        if new_params is not None:
            parameters = new_params
        emit(rnd, "fit_agg", fit_metrics.get("loss"), None, len(fit_res))
        print(f"round {rnd}: aggregate_fit received {len(fit_res)} results")

        eval_ins = strategy.configure_evaluate(rnd, parameters, list(clients))
        eval_res = [clients[cid].evaluate(parameters, cfg) for cid, cfg in eval_ins]
        eval_loss, eval_metrics = strategy.aggregate_evaluate(rnd, eval_res, [])
        emit(rnd, "eval_agg", eval_loss, eval_metrics.get("accuracy"), len(eval_res))
        print(f"round {rnd}: aggregate_evaluate received {len(eval_res)} results")

        central_loss, central_metrics = strategy.evaluate(rnd, parameters)
        emit(rnd, "central_eval", central_loss, central_metrics.get("accuracy"), 0)
        print(f"round {rnd}: central loss {central_loss:.6f} accuracy {central_metrics['accuracy']:.4f}")
    print("simulation finished")


if __name__ == "__main__":
    main()
