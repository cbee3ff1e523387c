from task import get_data, test, train


class FlowerClient:
    def __init__(self, partition_id, num_partitions, seed):
        self.train_data, self.test_data = get_data(partition_id, num_partitions, seed)

    def fit(self, parameters, config):
        params, loss = train(parameters, self.train_data, config["local_epochs"], config["lr"])
        return params, len(self.train_data), {"loss": loss}

    def evaluate(self, parameters, config):
        loss, accuracy = test(parameters, self.test_data)
        return loss, len(self.test_data), {"accuracy": accuracy}


def client_fn(context):
    return FlowerClient(context["partition_id"], context["num_partitions"], context["seed"])


client_app = client_fn
