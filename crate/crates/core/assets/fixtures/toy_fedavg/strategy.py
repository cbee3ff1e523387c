from task import get_model


def weighted(values):
    total = sum(n for _, n in values)
    return sum(v * n for v, n in values) / total


class FedAvgStrategy:
    def __init__(self, on_fit_config_fn, evaluate_fn):
        self.on_fit_config_fn = on_fit_config_fn
        self.evaluate_fn = evaluate_fn

    def initialize_parameters(self, client_manager):
        return get_model()

    def configure_fit(self, server_round, parameters, client_manager):
        config = self.on_fit_config_fn(server_round)
        return [(cid, config) for cid in client_manager]

    def aggregate_fit(self, server_round, results, failures):
        if not results:
            return None, {}
        total = sum(n for _, n, _ in results)
        dim = len(results[0][0])
        params = [sum(p[k] * n for p, n, _ in results) / total for k in range(dim)]
        loss = weighted([(m["loss"], n) for _, n, m in results])
        return params, {"loss": loss}

    def configure_evaluate(self, server_round, parameters, client_manager):
        return [(cid, {}) for cid in client_manager]

    def aggregate_evaluate(self, server_round, results, failures):
        if not results:
            return None, {}
        loss = weighted([(l, n) for l, n, _ in results])
        accuracy = weighted([(m["accuracy"], n) for _, n, m in results])
        return loss, {"accuracy": accuracy}

    def evaluate(self, server_round, parameters):
        return self.evaluate_fn(server_round, parameters)
